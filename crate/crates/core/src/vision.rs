//! Patch features for chest X-rays behind a pluggable backbone adapter.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::DynamicImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamGroup, ParamStore};

/// What a feature sequence encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Patches,
    ImagePrev,
    ImageCurr,
    TextPrev,
    Longitudinal,
    Decoder,
}

/// A `(length, width)` matrix of hidden states with a role tag.
#[derive(Debug, Clone)]
pub struct FeatureSeq {
    data: Tensor,
    pub role: Role,
}

impl FeatureSeq {
    pub fn new(data: Tensor, role: Role) -> Result<Self> {
        let (len, _) = data
            .dims2()
            .map_err(|_| Error::Shape(format!("feature sequence must be 2-D, got {:?}", data.dims())))?;
        if len == 0 {
            return Err(Error::Shape("feature sequence is empty".into()));
        }
        Ok(Self { data, role })
    }

    pub fn from_rows(rows: &[Vec<f64>], role: Role, dtype: DType) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let t = Tensor::from_vec(flat, (rows.len(), width), &Device::Cpu)?.to_dtype(dtype)?;
        Self::new(t, role)
    }

    /// Drops the leading batch axis of a `(1, length, width)` tensor.
    pub fn from_batched(t: &Tensor, role: Role) -> Result<Self> {
        Self::new(t.squeeze(0)?, role)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// `(1, length, width)` view for the batched layers.
    pub fn batched(&self) -> Result<Tensor> {
        Ok(self.data.unsqueeze(0)?)
    }

    pub fn len(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.data.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}

/// An image backbone producing `(patches, feature_dim)` features.
pub trait VisionBackend: Send + Sync {
    fn id(&self) -> String;

    fn feature_dim(&self) -> usize;

    /// Cells per side of the final feature grid.
    fn grid_side(&self, image_side: u32) -> u32 {
        image_side / 32
    }

    fn extract(&self, image: &DynamicImage) -> Result<FeatureSeq>;
}

pub fn extract_patch_features(image: &DynamicImage, backend: &dyn VisionBackend) -> Result<FeatureSeq> {
    backend.extract(image)
}

pub fn load_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
}

const STUB_CELL_GRID: usize = 4;

/// Deterministic stand-in for a pretrained CNN: each 32×32 cell is reduced
/// to 4×4 sub-cell means per channel, then mapped through a fixed seeded
/// random projection and `tanh`. Same seed and pixels give the same output.
#[derive(Debug, Clone)]
pub struct StubBackend {
    seed: u64,
    image_size: u32,
    feature_dim: usize,
    projection: Vec<f32>,
}

impl StubBackend {
    pub fn new(seed: u64, image_size: u32, feature_dim: usize) -> Result<Self> {
        if image_size < 32 || image_size % 32 != 0 {
            return Err(Error::InvalidInput(format!("stub backend needs a multiple of 32, got {image_size}")));
        }
        let desc = 3 * STUB_CELL_GRID * STUB_CELL_GRID + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        let scale = (3.0 / desc as f32).sqrt() * 2.0;
        let projection = (0..desc * feature_dim).map(|_| rng.random_range(-scale..scale)).collect();
        Ok(Self { seed, image_size, feature_dim, projection })
    }
}

impl VisionBackend for StubBackend {
    fn id(&self) -> String {
        format!("stub-{}-{}-{}", self.seed, self.image_size, self.feature_dim)
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn extract(&self, image: &DynamicImage) -> Result<FeatureSeq> {
        let side = self.image_size;
        let rgb = image.resize_exact(side, side, FilterType::Triangle).to_rgb8();
        let grid = self.grid_side(side) as usize;
        let sub = 32 / STUB_CELL_GRID;
        let desc_len = 3 * STUB_CELL_GRID * STUB_CELL_GRID + 1;
        let mut out = Vec::with_capacity(grid * grid * self.feature_dim);
        let mut desc = vec![0f32; desc_len];
        for gy in 0..grid {
            for gx in 0..grid {
                desc.iter_mut().for_each(|d| *d = 0.0);
                for y in 0..32 {
                    for x in 0..32 {
                        let px = rgb.get_pixel((gx * 32 + x) as u32, (gy * 32 + y) as u32);
                        let cell = (y / sub) * STUB_CELL_GRID + x / sub;
                        for c in 0..3 {
                            desc[c * STUB_CELL_GRID * STUB_CELL_GRID + cell] += px[c] as f32;
                        }
                    }
                }
                let norm = (sub * sub) as f32 * 255.0;
                for d in desc.iter_mut().take(desc_len - 1) {
                    *d = *d / norm - 0.5;
                }
                desc[desc_len - 1] = 1.0;
                for f in 0..self.feature_dim {
                    let mut acc = 0f32;
                    for (i, d) in desc.iter().enumerate() {
                        acc += d * self.projection[i * self.feature_dim + f];
                    }
                    out.push(acc.tanh());
                }
            }
        }
        let t = Tensor::from_vec(out, (grid * grid, self.feature_dim), &Device::Cpu)?;
        FeatureSeq::new(t, Role::Patches)
    }
}

/// Resolves a backend by name. Pretrained weights are not bundled, so only
/// the stub is constructible here; other backends plug in through
/// [`VisionBackend`].
pub fn backend_by_name(name: &str, seed: u64, image_size: u32, feature_dim: usize) -> Result<Box<dyn VisionBackend>> {
    match name {
        "stub" => Ok(Box::new(StubBackend::new(seed, image_size, feature_dim)?)),
        "resnet101" => Err(Error::BackendUnavailable(
            "pretrained ResNet-101 weights are not available in this build; use the `stub` backend".into(),
        )),
        other => Err(Error::BackendUnavailable(format!("unknown backend `{other}`; use the `stub` backend"))),
    }
}

/// Linear map from backbone width to model width (trained with the visual
/// learning rate).
#[derive(Debug, Clone)]
pub struct FeatureProjection {
    pub linear: Linear,
}

impl FeatureProjection {
    pub fn new(store: &mut ParamStore, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self { linear: Linear::new(store, "visual.projection", d_in, d_out, ParamGroup::Visual)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.linear.forward(x)
    }

    pub fn project(&self, f: &FeatureSeq) -> Result<FeatureSeq> {
        if f.width() != self.linear.in_dim() {
            return Err(Error::Shape(format!(
                "projection expects width {}, got {}",
                self.linear.in_dim(),
                f.width()
            )));
        }
        FeatureSeq::new(self.linear.forward(f.tensor())?, f.role)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    offset: u64,
    rows: usize,
    cols: usize,
}

/// On-disk feature cache: `features.bin` (little-endian f32 blocks) plus an
/// `index.json` keyed by `backend_id/image_id`.
#[derive(Debug)]
pub struct FeatureCache {
    dir: PathBuf,
    index: BTreeMap<String, CacheEntry>,
}

impl FeatureCache {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let index_path = dir.join("index.json");
        let index = if index_path.exists() {
            serde_json::from_reader(std::fs::File::open(&index_path)?)?
        } else {
            BTreeMap::new()
        };
        Ok(Self { dir: dir.to_path_buf(), index })
    }

    fn key(backend_id: &str, image_id: &str) -> String {
        format!("{backend_id}/{image_id}")
    }

    pub fn get(&self, backend_id: &str, image_id: &str) -> Result<Option<Tensor>> {
        let Some(e) = self.index.get(&Self::key(backend_id, image_id)) else {
            return Ok(None);
        };
        let mut f = std::fs::File::open(self.dir.join("features.bin"))?;
        f.seek(SeekFrom::Start(e.offset))?;
        let mut bytes = vec![0u8; e.rows * e.cols * 4];
        f.read_exact(&mut bytes)?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Some(Tensor::from_vec(values, (e.rows, e.cols), &Device::Cpu)?))
    }

    pub fn insert(&mut self, backend_id: &str, image_id: &str, features: &Tensor) -> Result<()> {
        let (rows, cols) = features.dims2()?;
        let values = features.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let mut f = OpenOptions::new().create(true).append(true).open(self.dir.join("features.bin"))?;
        let offset = f.seek(SeekFrom::End(0))?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        f.write_all(&bytes)?;
        self.index.insert(Self::key(backend_id, image_id), CacheEntry { offset, rows, cols });
        let tmp = self.dir.join("index.json.tmp");
        serde_json::to_writer(std::fs::File::create(&tmp)?, &self.index)?;
        std::fs::rename(tmp, self.dir.join("index.json"))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// In-memory backbone features per image id, `f32` `(patches, feature_dim)`.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    features: HashMap<String, Tensor>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_id: &str, features: Tensor) {
        self.features.insert(image_id.to_string(), features);
    }

    pub fn get(&self, image_id: &str) -> Result<&Tensor> {
        self.features
            .get(image_id)
            .ok_or_else(|| Error::InvalidInput(format!("no features for image `{image_id}`")))
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.features.contains_key(image_id)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Extracts features for every id not yet present, reading through the
    /// optional disk cache.
    pub fn extract_missing<F>(
        &mut self,
        image_ids: &[String],
        mut load: F,
        backend: &dyn VisionBackend,
        mut cache: Option<&mut FeatureCache>,
    ) -> Result<()>
    where
        F: FnMut(&str) -> Result<DynamicImage>,
    {
        let backend_id = backend.id();
        for id in image_ids {
            if self.contains(id) {
                continue;
            }
            if let Some(c) = cache.as_deref() {
                if let Some(t) = c.get(&backend_id, id)? {
                    self.insert(id, t);
                    continue;
                }
            }
            let f = backend.extract(&load(id)?)?;
            if let Some(c) = cache.as_deref_mut() {
                c.insert(&backend_id, id, f.tensor())?;
            }
            self.insert(id, f.tensor().clone());
        }
        Ok(())
    }
}

/// Loads `<dir>/<id>.png` (or `.jpg` / `.jpeg`).
pub fn image_from_dir(dir: &Path, image_id: &str) -> Result<DynamicImage> {
    for ext in ["png", "jpg", "jpeg"] {
        let p = dir.join(format!("{image_id}.{ext}"));
        if p.exists() {
            return load_image(&p);
        }
    }
    Err(Error::Image {
        path: dir.join(format!("{image_id}.png")),
        reason: "file not found".into(),
    })
}

/// Stable content hash of raw pixels, handy for cache keys and manifests.
pub fn pixel_digest(image: &DynamicImage) -> String {
    let rgb = image.to_rgb8();
    let d = Sha256::new()
        .chain_update(rgb.width().to_le_bytes())
        .chain_update(rgb.height().to_le_bytes())
        .chain_update(rgb.as_raw())
        .finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::GrayImage;

    fn gradient(side: u32) -> DynamicImage {
        DynamicImage::ImageLuma8(GrayImage::from_fn(side, side, |x, y| image::Luma([((x * 7 + y * 3) % 256) as u8])))
    }

    #[test]
    fn stub_grid_shapes() {
        let b = StubBackend::new(1, 224, 2048).unwrap();
        assert_eq!(b.grid_side(224), 7);
        let f = b.extract(&gradient(300)).unwrap();
        assert_eq!((f.len(), f.width()), (49, 2048));
        let b = StubBackend::new(1, 320, 2048).unwrap();
        assert_eq!(b.extract(&gradient(64)).unwrap().len(), 100);
    }

    #[test]
    fn stub_is_deterministic_and_content_sensitive() {
        let b = StubBackend::new(3, 64, 16).unwrap();
        let a1 = b.extract(&gradient(64)).unwrap().to_rows().unwrap();
        let a2 = b.extract(&gradient(64)).unwrap().to_rows().unwrap();
        assert_eq!(a1, a2);
        let other = DynamicImage::ImageLuma8(GrayImage::from_pixel(64, 64, image::Luma([9])));
        assert_ne!(a1, b.extract(&other).unwrap().to_rows().unwrap());
    }

    #[test]
    fn unavailable_backend_points_to_stub() {
        let err = backend_by_name("resnet101", 0, 224, 2048).err().unwrap();
        assert!(err.to_string().contains("stub"));
    }

    #[test]
    fn missing_image_names_path() {
        let err = image_from_dir(Path::new("/nonexistent"), "abc").unwrap_err();
        assert!(err.to_string().contains("abc.png"));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(&[[1f32, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap();
        {
            let mut c = FeatureCache::open(dir.path()).unwrap();
            c.insert("stub", "img", &t).unwrap();
            c.insert("stub", "img2", &(t.clone() * 2.0).unwrap()).unwrap();
        }
        let c = FeatureCache::open(dir.path()).unwrap();
        assert_eq!(c.len(), 2);
        let back = c.get("stub", "img2").unwrap().unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(back, vec![vec![2.0, 4.0], vec![6.0, 8.0]]);
        assert!(c.get("other", "img").unwrap().is_none());
    }
}
