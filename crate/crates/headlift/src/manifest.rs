//! Dataset manifests: one JSON file per dataset root listing its scenes.
//!
//! Every path in a manifest is relative to the directory holding it. Absolute
//! paths, `..` components and symlinks that resolve outside that directory
//! are rejected before anything is read.

use std::fs;
use std::path::{Component, Path, PathBuf};

use headlift_core::dataset::{Scene, SceneKind, View};
use headlift_core::fixtures::{fixture_dataset, FixtureConfig};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, Result};
use crate::formats::{self, CameraJson};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub image: String,
    pub mask: String,
    /// Optional class-index PNG.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg: Option<String>,
    pub camera: CameraJson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub scene_id: String,
    pub kind: SceneKind,
    pub views: Vec<ViewEntry>,
    /// Indices of views kept out of training.
    #[serde(default)]
    pub held_out: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub scenes: Vec<SceneManifest>,
}

/// Resolve `rel` under `root`, refusing anything that escapes it.
pub fn confined(root: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if rel.is_empty()
        || p.is_absolute()
        || p.components()
            .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir))
    {
        return Err(format_err!(
            "manifest path {rel:?} must be relative and stay inside the dataset root"
        ));
    }
    let root = root.canonicalize().map_err(|e| Error::io(root, e))?;
    let full = root.join(p);
    let real = full.canonicalize().map_err(|e| Error::io(&full, e))?;
    if !real.starts_with(&root) {
        return Err(format_err!(
            "manifest path {rel:?} resolves outside the dataset root"
        ));
    }
    Ok(real)
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        formats::read_json(path)
    }

    /// Load every scene. `root` is the manifest's directory.
    pub fn load(&self, root: &Path) -> Result<Vec<Scene>> {
        let mut ids = std::collections::BTreeSet::new();
        let mut scenes = Vec::with_capacity(self.scenes.len());
        for s in &self.scenes {
            if !ids.insert(&s.scene_id) {
                return Err(format_err!("duplicate scene id {}", s.scene_id));
            }
            let views = s
                .views
                .iter()
                .enumerate()
                .map(|(i, v)| load_view(root, &s.scene_id, i, v))
                .collect::<Result<Vec<_>>>()?;
            let scene = Scene {
                id: s.scene_id.clone(),
                kind: s.kind,
                views,
                held_out: s.held_out.clone(),
            };
            scene.validate()?;
            scenes.push(scene);
        }
        Ok(scenes)
    }
}

fn load_view(root: &Path, scene: &str, i: usize, v: &ViewEntry) -> Result<View> {
    let (image, _) = formats::read_image(&confined(root, &v.image)?)?;
    let mask = formats::read_mask(&confined(root, &v.mask)?)?;
    let camera = v.camera.to_camera()?;
    if (mask.width, mask.height) != (image.width, image.height) {
        return Err(format_err!(
            "{scene} view {i}: mask size differs from the image"
        ));
    }
    if (camera.width, camera.height) != (image.width, image.height) {
        return Err(format_err!(
            "{scene} view {i}: camera resolution differs from the image"
        ));
    }
    let seg = match &v.seg {
        Some(p) => {
            let path = confined(root, p)?;
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Some(formats::decode_seg_png(&bytes)?)
        }
        None => None,
    };
    Ok(View {
        id: format!("{scene}/view{i}"),
        image,
        mask,
        camera,
        seg,
    })
}

/// Read a manifest file and load its scenes relative to its directory.
pub fn load_dataset(manifest: &Path) -> Result<Vec<Scene>> {
    let m = DatasetManifest::read(manifest)?;
    let root = manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    m.load(root)
}

/// Write scenes as PNGs plus `manifest.json` under `root`.
pub fn write_dataset(root: &Path, scenes: &[Scene]) -> Result<PathBuf> {
    let mut manifest = DatasetManifest { scenes: Vec::new() };
    for s in scenes {
        let mut views = Vec::new();
        for (i, v) in s.views.iter().enumerate() {
            let base = format!("{}/view{i}", dir_name(&s.id));
            let image = format!("{base}.png");
            let mask = format!("{base}_mask.png");
            formats::write_png(&root.join(&image), &v.image)?;
            formats::write_bytes(&root.join(&mask), &formats::encode_mask(&v.mask)?)?;
            let seg = match &v.seg {
                Some(seg) => {
                    let p = format!("{base}_seg.png");
                    formats::write_bytes(&root.join(&p), &formats::encode_seg_png(seg)?)?;
                    Some(p)
                }
                None => None,
            };
            views.push(ViewEntry {
                image,
                mask,
                seg,
                camera: CameraJson::from(&v.camera),
            });
        }
        manifest.scenes.push(SceneManifest {
            scene_id: s.id.clone(),
            kind: s.kind,
            views,
            held_out: s.held_out.clone(),
        });
    }
    let path = root.join("manifest.json");
    formats::write_json(&path, &manifest)?;
    Ok(path)
}

/// Scene ids become directory names; keep them to a safe alphabet.
fn dir_name(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Generate the procedural fixture dataset on disk.
pub fn write_fixtures(
    root: &Path,
    seed: u64,
    per_kind: usize,
    cfg: &FixtureConfig,
) -> Result<PathBuf> {
    let scenes = fixture_dataset(seed, per_kind, cfg)?;
    write_dataset(root, &scenes)
}
