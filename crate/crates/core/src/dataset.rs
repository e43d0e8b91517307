//! On-disk dataset: one directory per scene plus a checksummed index.
//!
//! ```text
//! <root>/index.json           format version, ids, CRC32 of every file
//! <root>/<id>/image.ppm       binary P6, 8-bit
//! <root>/<id>/semseg.pgm      binary P5, 8-bit class ids
//! <root>/<id>/depth.bin       little-endian f32, row-major
//! <root>/<id>/meta.json       intrinsics, image size, boxes
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, CameraIntrinsics};
use crate::numerics::Tensor;
use crate::scene::{SceneSample, VEHICLE_NAMES};

pub const FORMAT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";
pub const SAMPLE_FILES: [&str; 4] = ["image.ppm", "semseg.pgm", "depth.bin", "meta.json"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub ids: Vec<String>,
    /// CRC32 keyed by `<id>/<file>`.
    pub checksums: IndexMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaBox {
    class: String,
    center: [f64; 3],
    dims: [f64; 3],
    yaw: f64,
    pitch: f64,
    roll: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    id: String,
    height: usize,
    width: usize,
    intrinsics: CameraIntrinsics,
    boxes: Vec<MetaBox>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Encodes a binary PNM (`P5`/`P6`) file.
pub fn encode_pnm(magic: &str, width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// Decodes a binary PNM file with 8-bit samples; returns `(width, height, data)`.
pub fn decode_pnm(path: &Path, bytes: &[u8], magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::corrupt(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| !c.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != magic {
        return Err(Error::corrupt(path, format!("expected {magic} magic")));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::corrupt(path, format!("bad {what} in header")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::corrupt(path, format!("maxval {maxval}, expected 255")));
    }
    // exactly one whitespace byte separates header and raster
    let body = &bytes[(pos + 1).min(bytes.len())..];
    let want = w * h * channels;
    if body.len() != want {
        return Err(Error::corrupt(
            path,
            format!("raster has {} bytes, expected {want}", body.len()),
        ));
    }
    Ok((w, h, body.to_vec()))
}

fn interleaved_to_planar(rgb: &[u8], h: usize, w: usize) -> Vec<f32> {
    let mut planar = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            planar[c * h * w + i] = rgb[3 * i + c] as f32 / 255.0;
        }
    }
    planar
}

fn encode_sample(s: &SceneSample) -> Result<[Vec<u8>; 4]> {
    let (h, w) = (s.height(), s.width());
    // planar [3×H×W] to interleaved RGB
    let img = s.image.data();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            rgb.push((img[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let depth: Vec<u8> = s.depth.iter().flat_map(|d| d.to_le_bytes()).collect();
    let boxes = s
        .boxes
        .iter()
        .map(|b| {
            let class = VEHICLE_NAMES
                .get(b.class_id)
                .ok_or_else(|| Error::Contract(format!("box class {} has no name", b.class_id)))?;
            Ok(MetaBox {
                class: class.to_string(),
                center: b.center,
                dims: b.dims,
                yaw: b.yaw,
                pitch: b.pitch,
                roll: b.roll,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = Meta {
        id: s.id.clone(),
        height: h,
        width: w,
        intrinsics: s.intrinsics,
        boxes,
    };
    let mut meta = serde_json::to_vec_pretty(&meta)?;
    meta.push(b'\n');
    Ok([
        encode_pnm("P6", w, h, &rgb),
        encode_pnm("P5", w, h, &s.semseg),
        depth,
        meta,
    ])
}

/// Writes `<root>/<id>/…` and returns the CRC32 of each file, keyed like the index.
pub fn write_sample(root: &Path, s: &SceneSample) -> Result<Vec<(String, u32)>> {
    let dir = root.join(&s.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let files = encode_sample(s)?;
    let mut sums = Vec::with_capacity(4);
    for (name, bytes) in SAMPLE_FILES.iter().zip(&files) {
        write_file(&dir.join(name), bytes)?;
        sums.push((format!("{}/{name}", s.id), crc32fast::hash(bytes)));
    }
    Ok(sums)
}

/// Writes every sample and the index.
pub fn write_dataset(root: &Path, samples: &[SceneSample]) -> Result<DatasetIndex> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut index = DatasetIndex {
        format_version: FORMAT_VERSION,
        ids: Vec::with_capacity(samples.len()),
        checksums: IndexMap::new(),
    };
    for s in samples {
        index.ids.push(s.id.clone());
        index.checksums.extend(write_sample(root, s)?);
    }
    let mut bytes = serde_json::to_vec_pretty(&index)?;
    bytes.push(b'\n');
    write_file(&root.join(INDEX_FILE), &bytes)?;
    Ok(index)
}

pub fn read_index(root: &Path) -> Result<DatasetIndex> {
    let path = root.join(INDEX_FILE);
    let bytes = read_file(&path)?;
    let index: DatasetIndex = serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(&path, e.to_string()))?;
    if index.format_version != FORMAT_VERSION {
        return Err(Error::corrupt(
            &path,
            format!("format version {}, expected {FORMAT_VERSION}", index.format_version),
        ));
    }
    Ok(index)
}

fn read_checked(root: &Path, id: &str, name: &str, index: &DatasetIndex) -> Result<(PathBuf, Vec<u8>)> {
    let path = root.join(id).join(name);
    let bytes = read_file(&path)?;
    let key = format!("{id}/{name}");
    let want = *index
        .checksums
        .get(&key)
        .ok_or_else(|| Error::corrupt(&path, "no checksum in index"))?;
    let got = crc32fast::hash(&bytes);
    if got != want {
        return Err(Error::corrupt(&path, format!("CRC32 {got:08x}, index says {want:08x}")));
    }
    Ok((path, bytes))
}

/// Reads one sample, verifying every file against the index checksums.
pub fn read_sample(root: &Path, id: &str) -> Result<SceneSample> {
    read_sample_with(root, id, &read_index(root)?)
}

pub fn read_sample_with(root: &Path, id: &str, index: &DatasetIndex) -> Result<SceneSample> {
    let (meta_path, meta) = read_checked(root, id, "meta.json", index)?;
    let meta: Meta = serde_json::from_slice(&meta).map_err(|e| Error::corrupt(&meta_path, e.to_string()))?;
    let (h, w) = (meta.height, meta.width);

    let (img_path, img) = read_checked(root, id, "image.ppm", index)?;
    let (iw, ih, rgb) = decode_pnm(&img_path, &img, "P6", 3)?;
    if (ih, iw) != (h, w) {
        return Err(Error::corrupt(&img_path, format!("size {ih}×{iw}, meta says {h}×{w}")));
    }
    let planar = interleaved_to_planar(&rgb, h, w);

    let (sem_path, sem) = read_checked(root, id, "semseg.pgm", index)?;
    let (sw, sh, semseg) = decode_pnm(&sem_path, &sem, "P5", 1)?;
    if (sh, sw) != (h, w) {
        return Err(Error::corrupt(&sem_path, format!("size {sh}×{sw}, meta says {h}×{w}")));
    }

    let (dep_path, dep) = read_checked(root, id, "depth.bin", index)?;
    if dep.len() != 4 * h * w {
        return Err(Error::corrupt(
            &dep_path,
            format!("{} bytes, expected {}", dep.len(), 4 * h * w),
        ));
    }
    let depth = dep
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let boxes = meta
        .boxes
        .into_iter()
        .map(|b| {
            let class_id = VEHICLE_NAMES
                .iter()
                .position(|n| *n == b.class)
                .ok_or_else(|| Error::corrupt(&meta_path, format!("unknown class {:?}", b.class)))?;
            Ok(Box3D {
                center: b.center,
                dims: b.dims,
                yaw: b.yaw,
                pitch: b.pitch,
                roll: b.roll,
                class_id,
                score: 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SceneSample {
        id: meta.id,
        image: Tensor::new(&[3, h, w], planar)?,
        semseg,
        depth,
        boxes,
        intrinsics: meta.intrinsics,
    })
}

/// Loads a P6 image as a planar `[3×H×W]` tensor in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = read_file(path)?;
    let (w, h, rgb) = decode_pnm(path, &bytes, "P6", 3)?;
    Tensor::new(&[3, h, w], interleaved_to_planar(&rgb, h, w))
}

/// Camera intrinsics stored in a sample's `meta.json`.
pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let bytes = read_file(path)?;
    let meta: Meta = serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(path, e.to_string()))?;
    Ok(meta.intrinsics)
}

/// Reads every sample listed in the index, in index order.
pub fn read_dataset(root: &Path) -> Result<Vec<SceneSample>> {
    let index = read_index(root)?;
    index.ids.iter().map(|id| read_sample_with(root, id, &index)).collect()
}
