//! In-memory datasets of rendered sequences and their on-disk form: a
//! `manifest.json` plus 8-bit RGB image PNGs, 16-bit millimetre depth PNGs
//! (0 = no measurement) and per-frame pose JSON files.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::sampling::{make_sparse, SamplingStrategy, SparseDepthMap};
use crate::scenegen::{generate_scene, Layout, SceneConfig};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Directory for generated datasets reused across runs.
pub const CACHE_ENV: &str = "SCAFF_FUSION_CACHE";

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Tensor,
    /// Dense ground truth in metres.
    pub depth: Tensor,
    pub sparse: SparseDepthMap,
    /// World-to-camera.
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub layout: Option<Layout>,
    pub intrinsics: Intrinsics,
    pub depth_range: (f64, f64),
    pub frames: Vec<Frame>,
}

/// Reference to the centre frame of a triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletRef {
    pub sequence: usize,
    pub frame: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_count() == 0
    }

    /// `(sequence, frame)` for every frame in order.
    pub fn frame_refs(&self) -> Vec<(usize, usize)> {
        self.sequences
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| (0..seq.frames.len()).map(move |f| (s, f)))
            .collect()
    }

    pub fn frame(&self, sequence: usize, frame: usize) -> &Frame {
        &self.sequences[sequence].frames[frame]
    }

    /// Every frame with a neighbour on both sides.
    pub fn triplets(&self) -> Vec<TripletRef> {
        self.sequences
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| (1..seq.frames.len().saturating_sub(1)).map(move |f| TripletRef { sequence: s, frame: f }))
            .collect()
    }

    /// `(width, height)` shared by all frames.
    pub fn resolution(&self) -> Result<(usize, usize)> {
        let first = self.sequences.first().ok_or_else(|| Error::Dataset("dataset is empty".into()))?;
        let res = (first.intrinsics.width, first.intrinsics.height);
        for seq in &self.sequences {
            if (seq.intrinsics.width, seq.intrinsics.height) != res {
                return Err(Error::Dataset(format!("sequence {} has a different resolution", seq.name)));
            }
        }
        Ok(res)
    }

    pub fn mean_density(&self) -> f64 {
        let n = self.frame_count();
        if n == 0 {
            return 0.0;
        }
        self.sequences
            .iter()
            .flat_map(|s| s.frames.iter())
            .map(|f| f.sparse.density())
            .sum::<f64>()
            / n as f64
    }

    /// Redraw every sparse map with another strategy, e.g. for a density sweep.
    pub fn resample(&self, strategy: &SamplingStrategy, seed: u64) -> Result<Dataset> {
        let mut out = self.clone();
        for (s, seq) in out.sequences.iter_mut().enumerate() {
            let sparse: Vec<SparseDepthMap> = seq
                .frames
                .par_iter()
                .enumerate()
                .map(|(f, frame)| {
                    make_sparse(&frame.depth, Some(&frame.image), strategy, derive_seed(seed, "sparse", frame_key(s, f)))
                })
                .collect::<Result<_>>()?;
            for (frame, z) in seq.frames.iter_mut().zip(sparse) {
                frame.sparse = z;
            }
        }
        Ok(out)
    }

    /// Keep the given sequences, in order.
    pub fn subset(&self, sequences: impl IntoIterator<Item = usize>) -> Dataset {
        Dataset {
            sequences: sequences.into_iter().map(|i| self.sequences[i].clone()).collect(),
        }
    }
}

fn frame_key(sequence: usize, frame: usize) -> u64 {
    ((sequence as u64) << 32) | frame as u64
}

/// Recipe for a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    pub seed: u64,
    pub layout: Layout,
    pub sequences: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub sampling: SamplingStrategy,
    /// Defaults to the layout's range.
    #[serde(default)]
    pub depth_range: Option<(f64, f64)>,
    #[serde(default)]
    pub objects: Option<(usize, usize)>,
}

impl GenerateSpec {
    pub fn new(seed: u64, layout: Layout, sequences: usize, frames: usize, sampling: SamplingStrategy) -> Self {
        Self {
            seed,
            layout,
            sequences,
            frames,
            width: 160,
            height: 128,
            sampling,
            depth_range: None,
            objects: None,
        }
    }

    pub fn scene_config(&self, sequence: usize) -> SceneConfig {
        let mut c = SceneConfig::new(derive_seed(self.seed, "sequence", sequence as u64), self.layout);
        c.frames = self.frames;
        c.width = self.width;
        c.height = self.height;
        if let Some(r) = self.depth_range {
            c.depth_range = r;
        }
        if let Some(o) = self.objects {
            c.objects = o;
        }
        c
    }

    /// Short stable digest, used to name cache entries.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("spec serialises");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

pub fn generate(spec: &GenerateSpec) -> Result<Dataset> {
    if spec.sequences == 0 {
        return Err(Error::InvalidInput("at least one sequence is required".into()));
    }
    let mut sequences = Vec::with_capacity(spec.sequences);
    for s in 0..spec.sequences {
        let config = spec.scene_config(s);
        let rendered = generate_scene(&config)?;
        let frames: Vec<Frame> = rendered
            .into_par_iter()
            .enumerate()
            .map(|(f, r)| {
                let sparse = make_sparse(&r.depth, Some(&r.image), &spec.sampling, derive_seed(spec.seed, "sparse", frame_key(s, f)))?;
                Ok(Frame {
                    image: r.image,
                    depth: r.depth,
                    sparse,
                    pose: r.pose,
                })
            })
            .collect::<Result<_>>()?;
        sequences.push(Sequence {
            name: format!("{}-{s:03}", spec.layout),
            layout: Some(spec.layout),
            intrinsics: config.intrinsics(),
            depth_range: config.depth_range,
            frames,
        });
    }
    Ok(Dataset { sequences })
}

/// Generate through the cache directory named by `SCAFF_FUSION_CACHE`, if set.
pub fn generate_cached(spec: &GenerateSpec) -> Result<Dataset> {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => {
            let path = PathBuf::from(dir).join(format!("{}-{}", spec.layout, spec.digest()));
            if path.join(MANIFEST_FILE).exists() {
                if let Ok(data) = load(&path) {
                    return Ok(data);
                }
            }
            let data = generate(spec)?;
            save(&data, &path)?;
            // Reload so cached and fresh runs see identically quantised data.
            load(&path)
        }
        _ => generate(spec),
    }
}

pub fn encode_depth_mm(depth: &Tensor) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    let (h, w) = (depth.height(), depth.width());
    let data = depth.data()[..h * w]
        .iter()
        .map(|&d| if d > 0.0 { (d * 1000.0).round().clamp(0.0, 65535.0) as u16 } else { 0 })
        .collect();
    ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer size matches")
}

pub fn decode_depth_mm(img: &ImageBuffer<Luma<u16>, Vec<u16>>) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f64::from(v) / 1000.0).collect();
    Tensor::from_vec(1, h as usize, w as usize, data).expect("buffer size matches")
}

pub fn encode_rgb(image: &Tensor) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (h, w) = (image.height(), image.width());
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn decode_rgb(img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::from_fn(3, h as usize, w as usize, |c, y, x| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(decode_rgb(&image::open(path)?.to_rgb8()))
}

pub fn read_depth(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    match image::open(path)? {
        image::DynamicImage::ImageLuma16(img) => Ok(decode_depth_mm(&img)),
        other => Err(Error::Dataset(format!(
            "{} is {:?}, expected a 16-bit single-channel PNG",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_depth(path: &Path, depth: &Tensor) -> Result<()> {
    encode_depth_mm(depth).save(path)?;
    Ok(())
}

/// Row-major rotation and translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseFile {
    fn from(p: &Pose) -> Self {
        let r = &p.rotation;
        Self {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl PoseFile {
    pub fn to_pose(&self) -> Result<Pose> {
        let r = self.rotation;
        Pose::new(
            Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]),
            Vector3::from(self.translation),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub image: PathBuf,
    pub depth: PathBuf,
    pub sparse: PathBuf,
    pub pose: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub name: String,
    #[serde(default)]
    pub layout: Option<Layout>,
    pub intrinsics: Intrinsics,
    pub depth_range: (f64, f64),
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    /// Mean fraction of pixels carrying a sparse measurement.
    #[serde(default)]
    pub mean_density: f64,
    /// Paths are relative to the manifest's directory.
    pub sequences: Vec<SequenceEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        Ok(manifest)
    }

    /// Check that every referenced file exists.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        for seq in &self.sequences {
            seq.intrinsics.validate()?;
            if (seq.intrinsics.width, seq.intrinsics.height) != (self.width, self.height) {
                return Err(Error::Dataset(format!("sequence {} does not match the manifest resolution", seq.name)));
            }
            for f in &seq.frames {
                for p in [&f.image, &f.depth, &f.sparse, &f.pose] {
                    let full = dir.join(p);
                    if !full.is_file() {
                        return Err(Error::MissingFile(full));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn save(data: &Dataset, dir: &Path) -> Result<Manifest> {
    let (width, height) = data.resolution()?;
    std::fs::create_dir_all(dir)?;
    let mut sequences = Vec::new();
    for seq in &data.sequences {
        std::fs::create_dir_all(dir.join(&seq.name))?;
        let entries: Vec<FrameEntry> = seq
            .frames
            .par_iter()
            .enumerate()
            .map(|(i, f)| -> Result<FrameEntry> {
                let rel = |suffix: &str| PathBuf::from(&seq.name).join(format!("{i:06}_{suffix}"));
                let e = FrameEntry {
                    image: rel("image.png"),
                    depth: rel("depth.png"),
                    sparse: rel("sparse.png"),
                    pose: rel("pose.json"),
                };
                encode_rgb(&f.image).save(dir.join(&e.image))?;
                write_depth(&dir.join(&e.depth), &f.depth)?;
                write_depth(&dir.join(&e.sparse), f.sparse.values())?;
                std::fs::write(dir.join(&e.pose), serde_json::to_string_pretty(&PoseFile::from(&f.pose))?)?;
                Ok(e)
            })
            .collect::<Result<_>>()?;
        sequences.push(SequenceEntry {
            name: seq.name.clone(),
            layout: seq.layout,
            intrinsics: seq.intrinsics,
            depth_range: seq.depth_range,
            frames: entries,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        width,
        height,
        mean_density: data.mean_density(),
        sequences,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(dir)?;
    manifest.validate(dir)?;
    let mut sequences = Vec::new();
    for seq in &manifest.sequences {
        let frames: Vec<Frame> = seq
            .frames
            .par_iter()
            .map(|e| -> Result<Frame> {
                let image = read_rgb(&dir.join(&e.image))?;
                let depth = read_depth(&dir.join(&e.depth))?;
                let sparse = SparseDepthMap::from_values(read_depth(&dir.join(&e.sparse))?)?;
                let pose: PoseFile = serde_json::from_str(&std::fs::read_to_string(dir.join(&e.pose))?)?;
                for (what, t) in [("image", &image), ("depth", &depth), ("sparse", sparse.values())] {
                    if (t.width(), t.height()) != (manifest.width, manifest.height) {
                        return Err(Error::Dataset(format!(
                            "{} {} is {}x{}, manifest says {}x{}",
                            what,
                            e.image.display(),
                            t.width(),
                            t.height(),
                            manifest.width,
                            manifest.height
                        )));
                    }
                }
                Ok(Frame {
                    image,
                    depth,
                    sparse,
                    pose: pose.to_pose()?,
                })
            })
            .collect::<Result<_>>()?;
        sequences.push(Sequence {
            name: seq.name.clone(),
            layout: seq.layout,
            intrinsics: seq.intrinsics,
            depth_range: seq.depth_range,
            frames,
        });
    }
    Ok(Dataset { sequences })
}
