use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_scene, load_image, sample_spec, CorpusError, CorpusParams, Image, QuerySample};
use crate::seeds::mix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7a11,
            Split::Val => 0x0e7a1,
        }
    }
}

/// One image: either a generator seed or a file path (relative paths resolve
/// against the manifest's directory).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub label: usize,
    #[serde(default)]
    pub queries: Vec<QuerySample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub classes: usize,
    #[serde(default)]
    pub generator: CorpusParams,
    pub entries: Vec<ManifestEntry>,
}

/// Scene seed of entry `index` in `split` under `base_seed`.
pub fn entry_seed(base_seed: u64, split: Split, index: usize) -> u64 {
    mix(mix(base_seed, split.salt()), index as u64)
}

fn is_shape_corpus(params: &CorpusParams) -> bool {
    params.min_objects == 1 && params.max_objects == 1 && !params.shapes.is_empty()
}

/// Generates `count` seeded entries. Labels are the shape class for
/// single-object corpora with an explicit shape list, otherwise the object
/// count.
pub fn build_manifest(params: &CorpusParams, split: Split, count: usize, base_seed: u64) -> Result<DatasetManifest, CorpusError> {
    params.validate()?;
    let shape_labels = is_shape_corpus(params);
    let classes = if shape_labels { params.shapes.len() } else { params.max_objects + 1 };
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let seed = entry_seed(base_seed, split, i);
        let spec = sample_spec(params, seed)?;
        let (_, queries) = generate_scene(&spec, seed)?;
        let label = if shape_labels {
            params.shapes.iter().position(|&s| s == spec.objects[0].shape).unwrap()
        } else {
            spec.object_count
        };
        entries.push(ManifestEntry { seed: Some(seed), path: None, label, queries });
    }
    Ok(DatasetManifest { split, classes, generator: params.clone(), entries })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        self.generator.validate()?;
        for (i, e) in self.entries.iter().enumerate() {
            if e.seed.is_some() == e.path.is_some() {
                return Err(CorpusError::Manifest(format!("entry {i} needs exactly one of seed or path")));
            }
            if e.label >= self.classes {
                return Err(CorpusError::Manifest(format!("entry {i} label {} >= class count {}", e.label, self.classes)));
            }
            let c = self.generator.canvas_size;
            for q in &e.queries {
                q.validate(c, c).map_err(|err| CorpusError::Manifest(format!("entry {i}: {err}")))?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| match source.kind() {
            std::io::ErrorKind::NotFound => CorpusError::NotFound(path.display().to_string()),
            _ => CorpusError::Io { path: path.display().to_string(), source },
        })?;
        let m: Self = serde_json::from_str(&text).map_err(|e| CorpusError::Manifest(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
    }

    /// Materializes entry `i`. `root` resolves relative paths.
    pub fn image(&self, i: usize, root: &Path, patch: usize) -> Result<Image, CorpusError> {
        let e = &self.entries[i];
        let img = match (e.seed, &e.path) {
            (Some(seed), _) => {
                let spec = sample_spec(&self.generator, seed)?;
                generate_scene(&spec, seed)?.0
            }
            (None, Some(p)) => {
                let p = PathBuf::from(p);
                load_image(if p.is_absolute() { p } else { root.join(p) }, patch)?
            }
            (None, None) => return Err(CorpusError::Manifest(format!("entry {i} has neither seed nor path"))),
        };
        img.check_patch(patch)?;
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_manifest_labels_are_shape_classes() {
        let m = build_manifest(&CorpusParams::shape_probe(), Split::Val, 40, 3).unwrap();
        assert_eq!(m.classes, 4);
        m.validate().unwrap();
        let mut seen = [false; 4];
        for e in &m.entries {
            seen[e.label] = true;
            assert_eq!(e.queries.len(), 2);
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn splits_draw_disjoint_seeds() {
        let p = CorpusParams::default();
        let a = build_manifest(&p, Split::Train, 50, 1).unwrap();
        let b = build_manifest(&p, Split::Val, 50, 1).unwrap();
        for e in &a.entries {
            assert!(b.entries.iter().all(|f| f.seed != e.seed));
        }
    }

    #[test]
    fn bad_label_rejected() {
        let mut m = build_manifest(&CorpusParams::default(), Split::Train, 2, 0).unwrap();
        m.entries[0].label = 99;
        assert!(matches!(m.validate(), Err(CorpusError::Manifest(_))));
    }
}
