//! Image identity, provenance, and content-addressed storage.
//!
//! Every image the system touches is an [`ImageState`]: decoded RGB pixels
//! plus a stable identity and a provenance link (original input or derived
//! by a tool from a parent). Pixel content is hashed once at construction;
//! the content digest names the on-disk file when images are persisted, so
//! byte-identical images share storage.

use std::collections::HashMap;
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use image::{ImageFormat, RgbImage};
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::ToolName;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("failed to encode image: {0}")]
    Encode(image::ImageError),
    #[error("unknown image id {0}")]
    UnknownId(ImageId),
    #[error("provenance cycle detected at {0}")]
    ProvenanceCycle(ImageId),
    #[error("content digest mismatch for {file}: expected {expected}, got {actual}")]
    DigestMismatch {
        file: String,
        expected: String,
        actual: String,
    },
    #[error("zero-dimension image ({width}x{height})")]
    ZeroDimension { width: u32, height: u32 },
}

/// Opaque image identity. Derived from the content digest *and* the
/// provenance edge, so a tool output is distinct from its parent even when
/// the pixels are identical (e.g. `reuse` of an in-budget original).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(String);

impl ImageId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// How an image came to exist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Derived { tool: ToolName, parent: ImageId },
}

/// Shared handle to decoded RGB pixel content plus its digest.
#[derive(Clone)]
pub struct ContentRef {
    pixels: Arc<RgbImage>,
    digest: String,
}

impl ContentRef {
    pub fn new(pixels: RgbImage) -> Self {
        let digest = pixel_digest(&pixels);
        Self {
            pixels: Arc::new(pixels),
            digest,
        }
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    /// Hex digest of the raw pixel content (dims + RGB bytes).
    pub fn digest(&self) -> &str {
        &self.digest
    }
}

impl fmt::Debug for ContentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContentRef")
            .field("digest", &self.digest)
            .field("dims", &(self.pixels.width(), self.pixels.height()))
            .finish()
    }
}

fn pixel_digest(img: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    let out = h.finalize();
    hex::encode(&out[..16])
}

fn derive_id(content_digest: &str, provenance: &Provenance) -> ImageId {
    let mut h = Sha256::new();
    h.update(b"image-state\0");
    h.update(content_digest.as_bytes());
    match provenance {
        Provenance::Original => h.update(b"\0original"),
        Provenance::Derived { tool, parent } => {
            h.update(b"\0derived\0");
            h.update(tool.as_str().as_bytes());
            h.update(b"\0");
            h.update(parent.as_str().as_bytes());
        }
    }
    let out = h.finalize();
    ImageId(hex::encode(&out[..16]))
}

/// An image with identity, pixel dimensions, content, and provenance.
///
/// Immutable value; clones share pixel content. Serializes as metadata only
/// (id, dims, content digest, provenance) — pixels live in the
/// content-addressed directory, see [`ImageStore::persist`].
#[derive(Debug, Clone)]
pub struct ImageState {
    id: ImageId,
    width: u32,
    height: u32,
    content: ContentRef,
    provenance: Provenance,
}

impl ImageState {
    fn build(pixels: RgbImage, provenance: Provenance) -> Result<Self, ImageError> {
        let (width, height) = (pixels.width(), pixels.height());
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroDimension { width, height });
        }
        let content = ContentRef::new(pixels);
        let id = derive_id(content.digest(), &provenance);
        Ok(Self {
            id,
            width,
            height,
            content,
            provenance,
        })
    }

    pub fn id(&self) -> &ImageId {
        &self.id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    pub fn content(&self) -> &ContentRef {
        &self.content
    }

    pub fn pixels(&self) -> &RgbImage {
        self.content.pixels()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn is_original(&self) -> bool {
        matches!(self.provenance, Provenance::Original)
    }

    /// Deterministic PNG encoding of the pixel content.
    pub fn png_bytes(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.pixels()
            .write_to(&mut out, ImageFormat::Png)
            .map_err(ImageError::Encode)?;
        Ok(out.into_inner())
    }
}

// Value equality is identity equality: the id commits to content digest and
// the full provenance edge.
impl PartialEq for ImageState {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Eq for ImageState {}

impl Serialize for ImageState {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("ImageState", 5)?;
        s.serialize_field("id", &self.id)?;
        s.serialize_field("width", &self.width)?;
        s.serialize_field("height", &self.height)?;
        s.serialize_field("content", self.content.digest())?;
        s.serialize_field("provenance", &self.provenance)?;
        s.end()
    }
}

/// Serialized form of an [`ImageState`]; rehydrate via [`ImageStore::hydrate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    /// Content digest; the pixel file is `<digest>.png` in the image dir.
    pub content: String,
    pub provenance: Provenance,
}

impl ImageRecord {
    pub fn of(state: &ImageState) -> Self {
        Self {
            id: state.id.clone(),
            width: state.width,
            height: state.height,
            content: state.content.digest().to_string(),
            provenance: state.provenance.clone(),
        }
    }
}

/// Thread-safe id → state registry with content-addressed persistence.
///
/// The store resolves provenance parents (needed by the `reuse` tool and by
/// dialogue image lookups) and reads/writes the image directory. All
/// registered states are immutable; the registry only grows.
#[derive(Default)]
pub struct ImageStore {
    registry: RwLock<HashMap<ImageId, ImageState>>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn register(&self, state: ImageState) -> ImageState {
        let mut reg = self.registry.write().expect("image registry poisoned");
        reg.entry(state.id.clone()).or_insert_with(|| state.clone());
        state
    }

    /// Registers decoded pixels as an original (root) image.
    pub fn add_original(&self, pixels: RgbImage) -> Result<ImageState, ImageError> {
        Ok(self.register(ImageState::build(pixels, Provenance::Original)?))
    }

    /// Registers pixels as the output of `tool` applied to `parent`.
    pub fn add_derived(
        &self,
        pixels: RgbImage,
        tool: ToolName,
        parent: &ImageState,
    ) -> Result<ImageState, ImageError> {
        let provenance = Provenance::Derived {
            tool,
            parent: parent.id.clone(),
        };
        // Parent may come from another store instance (e.g. hydrated
        // records); make sure the walk can resolve it here.
        self.register(parent.clone());
        Ok(self.register(ImageState::build(pixels, provenance)?))
    }

    /// Decodes a PNG or JPEG file and registers it as an original image.
    pub fn load_original(&self, path: &Path) -> Result<ImageState, ImageError> {
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let decoded = image::load_from_memory(&bytes).map_err(|source| ImageError::Decode {
            path: path.to_path_buf(),
            source,
        })?;
        self.add_original(decoded.to_rgb8())
    }

    pub fn get(&self, id: &ImageId) -> Option<ImageState> {
        self.registry
            .read()
            .expect("image registry poisoned")
            .get(id)
            .cloned()
    }

    /// Follows `Derived` parent links until the `Original` ancestor.
    ///
    /// Cycles are impossible by construction (a child id hashes its parent
    /// id) but the walk still guards against them, since records can be
    /// forged by hand.
    pub fn walk_to_original(&self, state: &ImageState) -> Result<ImageState, ImageError> {
        let mut seen: HashSet<ImageId> = HashSet::new();
        let mut cur = state.clone();
        loop {
            match &cur.provenance {
                Provenance::Original => return Ok(cur),
                Provenance::Derived { parent, .. } => {
                    if !seen.insert(cur.id.clone()) {
                        return Err(ImageError::ProvenanceCycle(cur.id.clone()));
                    }
                    cur = self
                        .get(parent)
                        .ok_or_else(|| ImageError::UnknownId(parent.clone()))?;
                }
            }
        }
    }

    /// Writes the pixel content to `<dir>/<digest>.png` (skipping if the
    /// file already exists) and returns the relative file name.
    pub fn persist(&self, state: &ImageState, dir: &Path) -> Result<String, ImageError> {
        let name = format!("{}.png", state.content.digest());
        let path = dir.join(&name);
        if !path.exists() {
            std::fs::create_dir_all(dir).map_err(|source| ImageError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            let bytes = state.png_bytes()?;
            std::fs::write(&path, bytes).map_err(|source| ImageError::Io {
                path: path.clone(),
                source,
            })?;
        }
        Ok(name)
    }

    /// Reconstructs an [`ImageState`] from its serialized record, reading
    /// pixels from the content-addressed directory and verifying the digest.
    pub fn hydrate(&self, record: &ImageRecord, dir: &Path) -> Result<ImageState, ImageError> {
        if let Some(existing) = self.get(&record.id) {
            return Ok(existing);
        }
        let file = format!("{}.png", record.content);
        let path = dir.join(&file);
        let bytes = std::fs::read(&path).map_err(|source| ImageError::Io {
            path: path.clone(),
            source,
        })?;
        let decoded = image::load_from_memory(&bytes).map_err(|source| ImageError::Decode {
            path: path.clone(),
            source,
        })?;
        let pixels = decoded.to_rgb8();
        let actual = pixel_digest(&pixels);
        if actual != record.content {
            return Err(ImageError::DigestMismatch {
                file,
                expected: record.content.clone(),
                actual,
            });
        }
        let state = ImageState::build(pixels, record.provenance.clone())?;
        Ok(self.register(state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            if (x + y) % 2 == 0 {
                image::Rgb([220, 220, 220])
            } else {
                image::Rgb([30, 30, 30])
            }
        })
    }

    #[test]
    fn ids_are_content_addressed_and_deterministic() {
        let store = ImageStore::new();
        let a = store.add_original(checkerboard(64, 48)).unwrap();
        let b = store.add_original(checkerboard(64, 48)).unwrap();
        assert_eq!(a.id(), b.id());
        assert_eq!(a.content().digest(), b.content().digest());
        let c = store.add_original(checkerboard(48, 64)).unwrap();
        assert_ne!(a.id(), c.id());
    }

    #[test]
    fn derived_id_differs_even_with_identical_pixels() {
        let store = ImageStore::new();
        let root = store.add_original(checkerboard(64, 48)).unwrap();
        let derived = store
            .add_derived(checkerboard(64, 48), ToolName::Reuse, &root)
            .unwrap();
        assert_ne!(root.id(), derived.id());
        assert_eq!(root.content().digest(), derived.content().digest());
    }

    #[test]
    fn provenance_walk_reaches_original() {
        let store = ImageStore::new();
        let root = store.add_original(checkerboard(64, 48)).unwrap();
        let d1 = store
            .add_derived(checkerboard(32, 24), ToolName::FocusArea, &root)
            .unwrap();
        let d2 = store
            .add_derived(checkerboard(16, 12), ToolName::ZoomIn, &d1)
            .unwrap();
        let orig = store.walk_to_original(&d2).unwrap();
        assert_eq!(orig.id(), root.id());
        assert!(orig.is_original());
    }

    #[test]
    fn walk_rejects_forged_cycle() {
        let store = ImageStore::new();
        let root = store.add_original(checkerboard(8, 8)).unwrap();
        let child = store
            .add_derived(checkerboard(8, 8), ToolName::Reuse, &root)
            .unwrap();
        // Forge a state whose parent link points at the child itself.
        let forged = ImageState {
            id: child.id().clone(),
            width: 8,
            height: 8,
            content: child.content().clone(),
            provenance: Provenance::Derived {
                tool: ToolName::Reuse,
                parent: child.id().clone(),
            },
        };
        store.register(forged.clone());
        // `register` keeps the first entry, so insert under a fresh store.
        let fresh = ImageStore::new();
        fresh.register(forged.clone());
        assert!(matches!(
            fresh.walk_to_original(&forged),
            Err(ImageError::ProvenanceCycle(_))
        ));
    }

    #[test]
    fn persist_and_hydrate_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::new();
        let root = store.add_original(checkerboard(40, 30)).unwrap();
        let name = store.persist(&root, dir.path()).unwrap();
        assert_eq!(name, format!("{}.png", root.content().digest()));

        let record = ImageRecord::of(&root);
        let other = ImageStore::new();
        let back = other.hydrate(&record, dir.path()).unwrap();
        assert_eq!(back.id(), root.id());
        assert_eq!(back.pixels().as_raw(), root.pixels().as_raw());
    }

    #[test]
    fn hydrate_detects_content_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::new();
        let root = store.add_original(checkerboard(40, 30)).unwrap();
        let record = ImageRecord::of(&root);
        store.persist(&root, dir.path()).unwrap();
        // Overwrite the content-addressed file with different pixels.
        let other = store.add_original(checkerboard(40, 31)).unwrap();
        std::fs::write(
            dir.path().join(format!("{}.png", root.content().digest())),
            other.png_bytes().unwrap(),
        )
        .unwrap();
        let fresh = ImageStore::new();
        assert!(matches!(
            fresh.hydrate(&record, dir.path()),
            Err(ImageError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn persist_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::new();
        let root = store.add_original(checkerboard(12, 12)).unwrap();
        let first = store.persist(&root, dir.path()).unwrap();
        let second = store.persist(&root, dir.path()).unwrap();
        assert_eq!(first, second);
        let entries = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(entries, 1);
    }

    #[test]
    fn serialization_carries_metadata_only() {
        let store = ImageStore::new();
        let root = store.add_original(checkerboard(10, 10)).unwrap();
        let json = serde_json::to_value(&root).unwrap();
        assert_eq!(json["width"], 10);
        assert_eq!(json["provenance"]["kind"], "original");
        assert_eq!(json["content"], root.content().digest());
        let record: ImageRecord = serde_json::from_value(json).unwrap();
        assert_eq!(record, ImageRecord::of(&root));
    }
}
