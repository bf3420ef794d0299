//! Scene containers and their on-disk formats.
//!
//! Rasters are stored pixel-major (all bands of pixel `(r, c)` are adjacent),
//! rows scanned top to bottom. Every container starts with a four byte magic
//! and a little-endian `u32` version, currently `1`.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CUBE_MAGIC: &[u8; 4] = b"MMRS";
pub const ELEVATION_MAGIC: &[u8; 4] = b"MMEL";
pub const LABEL_MAGIC: &[u8; 4] = b"MMLB";
pub const FORMAT_VERSION: u32 = 1;

/// Pixel coordinate as `(row, col)`.
pub type Pixel = (usize, usize);

/// Hyperspectral cube, `height × width × bands`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f32>,
}

impl HyperCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        check_grid("cube", height, width, bands, &values)?;
        Ok(Self {
            height,
            width,
            bands,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn bands(&self) -> usize {
        self.bands
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Spectrum of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.bands;
        &self.values[start..start + self.bands]
    }
}

/// LiDAR-derived elevation raster with one (DSM) or two (DSM + DTM) channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ElevationRaster {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl ElevationRaster {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if !(1..=2).contains(&channels) {
            return Err(Error::Data(format!(
                "elevation raster must have 1 or 2 channels, got {channels}"
            )));
        }
        check_grid("elevation raster", height, width, channels, &values)?;
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.values[start..start + self.channels]
    }
}

fn check_grid(what: &str, height: usize, width: usize, depth: usize, values: &[f32]) -> Result<()> {
    if height == 0 || width == 0 || depth == 0 {
        return Err(Error::Data(format!(
            "{what} dimensions must be positive, got {height}×{width}×{depth}"
        )));
    }
    let expected = height * width * depth;
    if values.len() != expected {
        return Err(Error::Data(format!(
            "{what} holds {} values, expected {expected}",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "{what} value {} at index {i} is not finite",
            values[i]
        )));
    }
    Ok(())
}

/// Per-pixel class labels. `0` marks unlabeled pixels, `1..=class_count` are classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    class_count: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, class_count: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!(
                "label map dimensions must be positive, got {height}×{width}"
            )));
        }
        if class_count == 0 || class_count > u16::MAX as usize {
            return Err(Error::Data(format!("invalid class count {class_count}")));
        }
        if labels.len() != height * width {
            return Err(Error::Data(format!(
                "label map holds {} labels, expected {}",
                labels.len(),
                height * width
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > class_count) {
            return Err(Error::Data(format!(
                "label {bad} exceeds declared class count {class_count}"
            )));
        }
        Ok(Self {
            height,
            width,
            class_count,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn class_count(&self) -> usize {
        self.class_count
    }
    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }
}

/// Fails unless cube, elevation raster and labels share the same grid.
pub fn validate_registration(
    cube: &HyperCube,
    lidar: &ElevationRaster,
    labels: &LabelMap,
) -> Result<()> {
    let dims = [
        ("cube", cube.height(), cube.width()),
        ("lidar", lidar.height(), lidar.width()),
        ("labels", labels.height(), labels.width()),
    ];
    let (ref_name, ref_h, ref_w) = dims[0];
    for &(name, h, w) in &dims[1..] {
        if h != ref_h {
            return Err(Error::Registration {
                dimension: "height",
                detail: format!("{ref_name} has {ref_h}, {name} has {h}"),
            });
        }
        if w != ref_w {
            return Err(Error::Registration {
                dimension: "width",
                detail: format!("{ref_name} has {ref_w}, {name} has {w}"),
            });
        }
    }
    Ok(())
}

/// A fully loaded, validated scene with its fixed train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub cube: HyperCube,
    pub lidar: ElevationRaster,
    pub labels: LabelMap,
    pub train_indices: Vec<Pixel>,
    pub test_indices: Vec<Pixel>,
}

impl SceneDataset {
    pub fn new(
        cube: HyperCube,
        lidar: ElevationRaster,
        labels: LabelMap,
        train_indices: Vec<Pixel>,
        test_indices: Vec<Pixel>,
    ) -> Result<Self> {
        validate_registration(&cube, &lidar, &labels)?;
        let (h, w) = (labels.height(), labels.width());
        let mut in_train = vec![false; h * w];
        for (split, list) in [("train", &train_indices), ("test", &test_indices)] {
            for &(r, c) in list.iter() {
                if r >= h || c >= w {
                    return Err(Error::Data(format!(
                        "{split} pixel ({r}, {c}) lies outside the {h}×{w} scene"
                    )));
                }
                if labels.get(r, c) == 0 {
                    return Err(Error::Data(format!(
                        "{split} pixel ({r}, {c}) is unlabeled"
                    )));
                }
            }
        }
        for &(r, c) in &train_indices {
            in_train[r * w + c] = true;
        }
        if let Some(&(r, c)) = test_indices.iter().find(|&&(r, c)| in_train[r * w + c]) {
            return Err(Error::Data(format!(
                "pixel ({r}, {c}) appears in both train and test splits"
            )));
        }
        if !train_indices.is_empty() {
            let mut seen = vec![false; labels.class_count() + 1];
            for &(r, c) in &train_indices {
                seen[labels.get(r, c) as usize] = true;
            }
            if let Some(missing) = (1..=labels.class_count()).find(|&k| !seen[k]) {
                return Err(Error::Data(format!(
                    "class {missing} has no pixel in the training split"
                )));
            }
        }
        Ok(Self {
            cube,
            lidar,
            labels,
            train_indices,
            test_indices,
        })
    }

    pub fn height(&self) -> usize {
        self.cube.height()
    }
    pub fn width(&self) -> usize {
        self.cube.width()
    }
    pub fn class_count(&self) -> usize {
        self.labels.class_count()
    }

    pub fn label(&self, pixel: Pixel) -> u16 {
        self.labels.get(pixel.0, pixel.1)
    }

    /// Loads a scene manifest. Relative file paths resolve against the
    /// manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: SceneManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let cube = read_cube(&base.join(&manifest.cube))?;
        let lidar = read_elevation(&base.join(&manifest.lidar))?;
        let labels = read_labels(&base.join(&manifest.labels))?;
        let to_pixels = |v: &[[usize; 2]]| v.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>();
        Self::new(
            cube,
            lidar,
            labels,
            to_pixels(&manifest.train_indices),
            to_pixels(&manifest.test_indices),
        )
    }

    /// Writes the three rasters plus `scene.json` into `dir` and returns the
    /// manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_cube(&self.cube, &dir.join("cube.mmrs"))?;
        write_elevation(&self.lidar, &dir.join("lidar.mmel"))?;
        write_labels(&self.labels, &dir.join("labels.mmlb"))?;
        let manifest = SceneManifest {
            cube: "cube.mmrs".into(),
            lidar: "lidar.mmel".into(),
            labels: "labels.mmlb".into(),
            train_indices: self.train_indices.iter().map(|&(r, c)| [r, c]).collect(),
            test_indices: self.test_indices.iter().map(|&(r, c)| [r, c]).collect(),
        };
        let path = dir.join("scene.json");
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// JSON scene manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub cube: PathBuf,
    pub lidar: PathBuf,
    pub labels: PathBuf,
    pub train_indices: Vec<[usize; 2]>,
    pub test_indices: Vec<[usize; 2]>,
}

// ---------------------------------------------------------------------------
// binary containers

/// Header of an MMRS/MMEL grid container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridHeader {
    pub magic: [u8; 4],
    pub height: u32,
    pub width: u32,
    pub depth: u32,
}

/// Header of an MMLB label container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelHeader {
    pub height: u32,
    pub width: u32,
    pub class_count: u32,
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'a str) -> Self {
        Self {
            bytes,
            pos: 0,
            what,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "{}: truncated, needed {n} bytes at offset {} of {}",
                self.what,
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Format(format!("{}: string is not valid UTF-8", self.what)))
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported version {v}",
                self.what
            )));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads the first `n` bytes of a file without touching the rest.
pub(crate) fn read_prefix(path: &Path, n: usize) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(n);
    BufReader::new(file)
        .take(n as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn decode_grid(
    bytes: &[u8],
    magic: &[u8; 4],
    what: &str,
) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut r = ByteReader::new(bytes, what);
    r.expect_magic(magic)?;
    r.expect_version()?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let d = r.u32()? as usize;
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("{what}: header dimensions overflow")))?;
    let payload = r.take(count * 4)?;
    r.finish()?;
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((h, w, d, values))
}

fn encode_grid(magic: &[u8; 4], h: usize, w: usize, d: usize, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + values.len() * 4);
    out.extend_from_slice(magic);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, h as u32);
    put_u32(&mut out, w as u32);
    put_u32(&mut out, d as u32);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_cube(path: &Path) -> Result<HyperCube> {
    let bytes = read_file(path)?;
    let what = path.display().to_string();
    let (h, w, b, values) = decode_grid(&bytes, CUBE_MAGIC, &what)?;
    HyperCube::new(h, w, b, values)
}

pub fn write_cube(cube: &HyperCube, path: &Path) -> Result<()> {
    check_grid("cube", cube.height, cube.width, cube.bands, &cube.values)?;
    write_file(
        path,
        &encode_grid(
            CUBE_MAGIC,
            cube.height,
            cube.width,
            cube.bands,
            &cube.values,
        ),
    )
}

pub fn read_elevation(path: &Path) -> Result<ElevationRaster> {
    let bytes = read_file(path)?;
    let what = path.display().to_string();
    let (h, w, l, values) = decode_grid(&bytes, ELEVATION_MAGIC, &what)?;
    ElevationRaster::new(h, w, l, values)
}

pub fn write_elevation(raster: &ElevationRaster, path: &Path) -> Result<()> {
    check_grid(
        "elevation raster",
        raster.height,
        raster.width,
        raster.channels,
        &raster.values,
    )?;
    write_file(
        path,
        &encode_grid(
            ELEVATION_MAGIC,
            raster.height,
            raster.width,
            raster.channels,
            &raster.values,
        ),
    )
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let bytes = read_file(path)?;
    let what = path.display().to_string();
    let mut r = ByteReader::new(&bytes, &what);
    r.expect_magic(LABEL_MAGIC)?;
    r.expect_version()?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    let payload = r.take(h * w * 2)?;
    r.finish()?;
    let labels = payload
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    LabelMap::new(h, w, c, labels)
}

pub fn write_labels(map: &LabelMap, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(20 + map.labels.len() * 2);
    out.extend_from_slice(LABEL_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, map.height as u32);
    put_u32(&mut out, map.width as u32);
    put_u32(&mut out, map.class_count as u32);
    for l in &map.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    write_file(path, &out)
}

/// Reads only the 20-byte header of an MMRS or MMEL file.
pub fn read_grid_header(path: &Path) -> Result<GridHeader> {
    let bytes = read_prefix(path, 20)?;
    let what = path.display().to_string();
    let mut r = ByteReader::new(&bytes, &what);
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != CUBE_MAGIC && &magic != ELEVATION_MAGIC {
        return Err(Error::Format(format!("{what}: not a grid container")));
    }
    r.expect_version()?;
    Ok(GridHeader {
        magic,
        height: r.u32()?,
        width: r.u32()?,
        depth: r.u32()?,
    })
}

pub fn read_label_header(path: &Path) -> Result<LabelHeader> {
    let bytes = read_prefix(path, 20)?;
    let what = path.display().to_string();
    let mut r = ByteReader::new(&bytes, &what);
    r.expect_magic(LABEL_MAGIC)?;
    r.expect_version()?;
    Ok(LabelHeader {
        height: r.u32()?,
        width: r.u32()?,
        class_count: r.u32()?,
    })
}
