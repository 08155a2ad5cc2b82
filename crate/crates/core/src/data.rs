//! On-disk dataset bundles.
//!
//! A bundle is a directory holding:
//!
//! - `manifest.json`: sizes, vocabulary and label names, format version.
//! - `nodes.tsv`: `id<TAB>labels<TAB>words`, indices comma-separated.
//! - `regions.f32`: `N·D·M_feat` little-endian `f32`, row-major, node order.
//! - `images.f32` (optional): `N·c·h·w` little-endian `f32` raw images.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DmanError, Result};
use crate::graph::{epoch_shuffle, MultimodalNode};
use crate::regions::{PatchProjector, RawImage, RegionFeatures, RegionInput, RegionProvider};

pub const BUNDLE_FORMAT: &str = "dman-bundle";
pub const BUNDLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const NODES_FILE: &str = "nodes.tsv";
pub const REGIONS_FILE: &str = "regions.f32";
pub const IMAGES_FILE: &str = "images.f32";

/// Relative paths resolve against this directory when it is set.
pub const DATA_DIR_ENV: &str = "DMAN_DATA_DIR";

pub fn resolve_path(p: impl AsRef<Path>) -> PathBuf {
    let p = p.as_ref();
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if p.is_relative() => PathBuf::from(dir).join(p),
        _ => p.to_path_buf(),
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DmanError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| DmanError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DmanError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| DmanError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| DmanError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Nodes `N`.
    pub n: usize,
    /// Vocabulary size `L`.
    pub l: usize,
    /// Regions per node `D`.
    pub d: usize,
    pub m_feat: usize,
    /// Label count `C`.
    pub c: usize,
    pub vocabulary: Vec<String>,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<ImageShape>,
}

impl Manifest {
    pub fn new(n: usize, l: usize, d: usize, m_feat: usize, vocabulary: Vec<String>, labels: Vec<String>) -> Self {
        Self {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            n,
            l,
            d,
            m_feat,
            c: labels.len(),
            vocabulary,
            labels,
            images: None,
        }
    }

    /// Exact byte length of `regions.f32`.
    pub fn region_bytes(&self) -> u64 {
        (self.n * self.d * self.m_feat * 4) as u64
    }

    pub fn image_bytes(&self) -> Option<u64> {
        self.images
            .map(|s| (self.n * s.channels * s.height * s.width * 4) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub id: usize,
    pub labels: Vec<usize>,
    pub words: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub manifest: Manifest,
    pub nodes: Vec<NodeRecord>,
    pub regions: Option<Vec<f32>>,
    pub images: Option<Vec<f32>>,
}

fn join(ix: &[usize]) -> String {
    ix.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str, path: &Path, line: usize) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim().parse().map_err(|_| DmanError::Parse {
                path: path.to_path_buf(),
                msg: format!("line {line}: bad index `{t}`"),
            })
        })
        .collect()
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f32_file(path: &Path, expected: u64) -> Result<Vec<f32>> {
    let bytes = read_file(path)?;
    if bytes.len() as u64 != expected {
        return Err(DmanError::Corrupt {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl DatasetBundle {
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let bad = |msg: String| Err(DmanError::Input(msg));
        if m.format != BUNDLE_FORMAT {
            return bad(format!("manifest format `{}` is not `{BUNDLE_FORMAT}`", m.format));
        }
        if m.version != BUNDLE_VERSION {
            return Err(DmanError::Version {
                what: "bundle manifest".into(),
                found: m.version,
                expected: BUNDLE_VERSION,
            });
        }
        if m.vocabulary.len() != m.l || m.labels.len() != m.c {
            return bad(format!(
                "manifest declares L={} C={} but lists {} words and {} labels",
                m.l,
                m.c,
                m.vocabulary.len(),
                m.labels.len()
            ));
        }
        if self.nodes.len() != m.n {
            return bad(format!("manifest declares N={} but has {} node records", m.n, self.nodes.len()));
        }
        for (i, r) in self.nodes.iter().enumerate() {
            if r.id != i {
                return bad(format!("node ids must be 0..N-1 in order; position {i} has id {}", r.id));
            }
            if let Some(w) = r.words.iter().find(|&&w| w >= m.l) {
                return bad(format!("node {i}: word index {w} >= L={}", m.l));
            }
            if let Some(c) = r.labels.iter().find(|&&c| c >= m.c) {
                return bad(format!("node {i}: label index {c} >= C={}", m.c));
            }
        }
        if self.regions.is_none() && self.images.is_none() {
            return bad("bundle has neither region features nor raw images".into());
        }
        if let Some(r) = &self.regions {
            if (r.len() * 4) as u64 != m.region_bytes() {
                return bad(format!("{} region values, expected {}", r.len(), m.region_bytes() / 4));
            }
        }
        match (&self.images, m.image_bytes()) {
            (Some(img), Some(bytes)) if (img.len() * 4) as u64 != bytes => {
                return bad(format!("{} image values, expected {}", img.len(), bytes / 4));
            }
            (Some(_), None) => return bad("images present but manifest has no image shape".into()),
            _ => {}
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
        let mut nodes = String::from("id\tlabels\twords\n");
        for r in &self.nodes {
            nodes.push_str(&format!("{}\t{}\t{}\n", r.id, join(&r.labels), join(&r.words)));
        }
        write_atomic(&dir.join(NODES_FILE), nodes.as_bytes())?;
        if let Some(r) = &self.regions {
            write_atomic(&dir.join(REGIONS_FILE), &f32_bytes(r))?;
        }
        if let Some(img) = &self.images {
            write_atomic(&dir.join(IMAGES_FILE), &f32_bytes(img))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_str(&read_text(&mpath)?).map_err(|e| DmanError::Parse {
            path: mpath.clone(),
            msg: e.to_string(),
        })?;
        if manifest.version != BUNDLE_VERSION {
            return Err(DmanError::Version {
                what: mpath.display().to_string(),
                found: manifest.version,
                expected: BUNDLE_VERSION,
            });
        }
        let npath = dir.join(NODES_FILE);
        let text = read_text(&npath)?;
        let mut nodes = Vec::with_capacity(manifest.n);
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(DmanError::Parse {
                    path: npath.clone(),
                    msg: format!("line {}: expected 3 tab-separated columns", ln + 1),
                });
            }
            let id = cols[0].parse().map_err(|_| DmanError::Parse {
                path: npath.clone(),
                msg: format!("line {}: bad id `{}`", ln + 1, cols[0]),
            })?;
            nodes.push(NodeRecord {
                id,
                labels: parse_list(cols[1], &npath, ln + 1)?,
                words: parse_list(cols[2], &npath, ln + 1)?,
            });
        }
        let rpath = dir.join(REGIONS_FILE);
        let regions = if rpath.exists() || manifest.images.is_none() {
            Some(read_f32_file(&rpath, manifest.region_bytes())?)
        } else {
            None
        };
        let images = match manifest.image_bytes() {
            Some(bytes) => Some(read_f32_file(&dir.join(IMAGES_FILE), bytes)?),
            None => None,
        };
        let bundle = Self {
            manifest,
            nodes,
            regions,
            images,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Stored region matrix of node `i`, widened to `f64`.
    pub fn region_features(&self, i: usize) -> Result<RegionFeatures> {
        let m = &self.manifest;
        let r = self
            .regions
            .as_ref()
            .ok_or_else(|| DmanError::Input("bundle has no stored region features".into()))?;
        let k = m.d * m.m_feat;
        if i >= m.n {
            return Err(DmanError::Input(format!("node {i} out of range (N={})", m.n)));
        }
        RegionFeatures::new(m.d, m.m_feat, r[i * k..(i + 1) * k].iter().map(|&v| v as f64).collect())
    }

    pub fn raw_image(&self, i: usize) -> Result<RawImage> {
        let shape = self
            .manifest
            .images
            .ok_or_else(|| DmanError::Input("bundle has no raw images".into()))?;
        let img = self.images.as_ref().expect("validated with manifest image shape");
        let k = shape.channels * shape.height * shape.width;
        if i >= self.manifest.n {
            return Err(DmanError::Input(format!("node {i} out of range (N={})", self.manifest.n)));
        }
        Ok(RawImage {
            channels: shape.channels,
            height: shape.height,
            width: shape.width,
            data: img[i * k..(i + 1) * k].iter().map(|&v| v as f64).collect(),
        })
    }

    /// Patch projector matching this bundle's image shape and declared `D`, `M_feat`.
    pub fn patch_projector(&self, seed: u64) -> Result<PatchProjector> {
        let m = &self.manifest;
        let s = m
            .images
            .ok_or_else(|| DmanError::Config("patch projector needs a bundle with raw images".into()))?;
        let grid = PatchProjector::grid_for(m.d, s.height, s.width).ok_or_else(|| {
            DmanError::Config(format!("no {}-cell grid tiles {}x{} images", m.d, s.height, s.width))
        })?;
        PatchProjector::new((s.channels, s.height, s.width), grid, m.m_feat, seed)
    }

    /// All nodes with their stored region features.
    pub fn to_nodes(&self) -> Result<Vec<MultimodalNode>> {
        (0..self.manifest.n)
            .map(|i| self.make_node(i, i, self.region_features(i)?))
            .collect()
    }

    /// All nodes with regions computed by `provider` from the raw images.
    pub fn to_nodes_with(&self, provider: &dyn RegionProvider) -> Result<Vec<MultimodalNode>> {
        (0..self.manifest.n)
            .map(|i| {
                let img = self.raw_image(i)?;
                let r = provider.image_to_regions(RegionInput::Image(&img))?;
                self.make_node(i, i, r)
            })
            .collect()
    }

    fn make_node(&self, source: usize, id: usize, regions: RegionFeatures) -> Result<MultimodalNode> {
        let r = &self.nodes[source];
        MultimodalNode::new(id, regions, r.words.clone(), self.manifest.l, r.labels.clone())
    }

    /// Vocabulary index of the word naming label `c`, if present.
    pub fn label_word(&self, c: usize) -> Option<usize> {
        let name = self.manifest.labels.get(c)?;
        self.manifest.vocabulary.iter().position(|w| w == name)
    }
}

/// Picks nodes `ids` (in that order) out of `nodes`, renumbering them `0..`.
pub fn subset(nodes: &[MultimodalNode], ids: &[usize]) -> Vec<MultimodalNode> {
    ids.iter()
        .enumerate()
        .map(|(new, &old)| {
            let mut n = nodes[old].clone();
            n.id = new;
            n
        })
        .collect()
}

/// Seeded split into `(train, test)` id lists, both sorted. The train side
/// gets `round(n * train_fraction)` ids.
pub fn split_ids(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = epoch_shuffle((0..n).collect(), &mut rng);
    let k = ((n as f64) * train_fraction).round() as usize;
    let mut train = order[..k.min(n)].to_vec();
    let mut test = order[k.min(n)..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}
