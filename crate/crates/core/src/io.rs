//! On-disk formats: PGM frames, dataset manifests, calibration files and
//! network weights. Every format round-trips bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytical::CalibrationParams;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::optics::{FrameMeta, LaserSpec, MarkerSpec, OpticalParams, Pose, SpeckleFrame};
use crate::rng::{derive_seed, STREAM_FRAME_NOISE};
use crate::scene::{split_assignment, CaptureSequence, Provenance, SweepSpec};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------- PGM

/// Binary PGM (`P5`). 8-bit frames store one byte per sample, 16-bit frames two
/// bytes, most significant first.
pub fn encode_pgm(pixels: &Grid<u16>, bit_depth: u8) -> Result<Vec<u8>> {
    let maxval: u32 = match bit_depth {
        8 => 255,
        16 => 65535,
        b => return Err(Error::Format(format!("PGM bit depth must be 8 or 16, got {b}"))),
    };
    let (w, h) = pixels.dims();
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in pixels.data() {
        if u32::from(v) > maxval {
            return Err(Error::Format(format!("sample {v} exceeds maxval {maxval}")));
        }
        if bit_depth == 8 {
            out.push(v as u8);
        } else {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    Ok(out)
}

/// Parses a `P5` image into pixels and bit depth.
pub fn decode_pgm(bytes: &[u8]) -> Result<(Grid<u16>, u8)> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P5" {
        return Err(Error::Format("not a binary PGM (expected P5)".into()));
    }
    let num = |pos: &mut usize, what: &str| -> Result<usize> {
        let t = token(pos)?;
        t.parse().map_err(|_| Error::Format(format!("bad PGM {what}: {t:?}")))
    };
    let w = num(&mut pos, "width")?;
    let h = num(&mut pos, "height")?;
    let maxval = num(&mut pos, "maxval")?;
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let (depth, bytes_per) = match maxval {
        255 => (8u8, 1),
        65535 => (16u8, 2),
        m => return Err(Error::Format(format!("unsupported PGM maxval {m}"))),
    };
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(bytes_per))
        .ok_or_else(|| Error::Format("PGM dimensions overflow".into()))?;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != need {
        return Err(Error::Format(format!(
            "PGM raster has {} bytes, expected {need} for {w}x{h}",
            raster.len()
        )));
    }
    let data = if bytes_per == 1 {
        raster.iter().map(|&b| u16::from(b)).collect()
    } else {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok((Grid::from_vec(w, h, data)?, depth))
}

pub fn write_frame(path: &Path, frame: &SpeckleFrame) -> Result<()> {
    write_bytes(path, &encode_pgm(&frame.pixels, frame.meta.bit_depth)?)
}

/// Reads PGM pixels; pose and metadata are not stored in the image.
pub fn read_frame_pixels(path: &Path) -> Result<(Grid<u16>, u8)> {
    decode_pgm(&read_bytes(path)?)
}

// ---------------------------------------------------------------- manifest

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub file: String,
    pub frame_index: u64,
    pub pose: Pose,
    pub noise_seed: u64,
    /// Pose group, `frame_index / frames_per_pose` of the original sequence.
    pub group: usize,
    /// 0 train, 1 validation, 2 test.
    pub split: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub scale: String,
    pub optics: OpticalParams,
    pub laser: LaserSpec,
    pub marker: MarkerSpec,
    pub sweep: SweepSpec,
    pub master_seed: u64,
    pub surface_seed: u64,
    pub split: SplitSpec,
    pub frames: Vec<FrameRecord>,
}

impl DatasetManifest {
    /// Canonical text: fields in declaration order, two-space indent, trailing newline.
    pub fn to_canonical_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_canonical_json()?.as_bytes()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let v: Version = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("manifest without a readable format_version: {e}")))?;
        if v.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest format_version {} not supported (expected {MANIFEST_VERSION})",
                v.format_version
            )));
        }
        let m: DatasetManifest = serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.frames {
            if !r.pose.in_distribution() {
                return Err(Error::Format(format!("frame {} pose out of range: {:?}", r.frame_index, r.pose)));
            }
            if r.split > 2 {
                return Err(Error::Format(format!("frame {} has split {}", r.frame_index, r.split)));
            }
        }
        if self.frames.windows(2).any(|w| w[1].frame_index <= w[0].frame_index) {
            return Err(Error::Format("frame indices must increase strictly".into()));
        }
        Ok(())
    }

    pub fn frame_path(dir: &Path, record: &FrameRecord) -> PathBuf {
        dir.join(&record.file)
    }
}

/// A dataset directory in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sequence: CaptureSequence,
}

impl Dataset {
    /// Builds the manifest for `seq`, assigning pose groups to splits.
    pub fn new(
        seq: CaptureSequence,
        scale: &str,
        optics: &OpticalParams,
        laser: &LaserSpec,
        marker: &MarkerSpec,
        split: SplitSpec,
    ) -> Result<Self> {
        let assignment = split_assignment(&seq, split.ratios, split.seed)?;
        let f = seq.frames_per_pose();
        let frames = seq
            .frames
            .iter()
            .enumerate()
            .map(|(i, fr)| FrameRecord {
                file: format!("frames/frame_{:06}.pgm", fr.frame_index),
                frame_index: fr.frame_index,
                pose: fr.pose,
                noise_seed: derive_seed(seq.provenance.master_seed, STREAM_FRAME_NOISE, fr.frame_index),
                group: i / f,
                split: assignment[i / f] as u8,
            })
            .collect();
        let manifest = DatasetManifest {
            format_version: MANIFEST_VERSION,
            scale: scale.to_string(),
            optics: optics.clone(),
            laser: laser.clone(),
            marker: marker.clone(),
            sweep: seq.provenance.sweep.clone(),
            master_seed: seq.provenance.master_seed,
            surface_seed: seq.provenance.surface_seed,
            split,
            frames,
        };
        Ok(Self { manifest, sequence: seq })
    }

    /// Frames of one split (0 train, 1 validation, 2 test) as a sequence of whole stacks.
    pub fn split(&self, which: u8) -> CaptureSequence {
        let keep: Vec<usize> = (0..self.manifest.frames.len())
            .filter(|&i| self.manifest.frames[i].split == which)
            .collect();
        CaptureSequence {
            frames: keep.iter().map(|&i| self.sequence.frames[i].clone()).collect(),
            schedule: keep.iter().map(|&i| self.sequence.schedule[i]).collect(),
            provenance: self.sequence.provenance.clone(),
        }
    }

    pub fn hash(&self) -> Result<String> {
        self.manifest.hash()
    }
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    for (rec, frame) in ds.manifest.frames.iter().zip(&ds.sequence.frames) {
        write_frame(&DatasetManifest::frame_path(dir, rec), frame)?;
    }
    write_bytes(&dir.join(MANIFEST_FILE), ds.manifest.to_canonical_json()?.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = read_bytes(&path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Format(format!("{} is not UTF-8", path.display())))?;
    DatasetManifest::from_json(&text)
}

/// Loads a dataset directory. Every referenced frame must exist and match the
/// manifest's sensor size and bit depth.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let (w, h) = (manifest.optics.sensor_w_px, manifest.optics.sensor_h_px);
    let meta = FrameMeta {
        bit_depth: manifest.optics.bit_depth,
        pitch_m: manifest.optics.pitch_m,
        lambda0_m: manifest.laser.lambda0_m,
        delta_lambda_m: manifest.laser.delta_lambda_m,
    };
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for rec in &manifest.frames {
        let path = DatasetManifest::frame_path(dir, rec);
        let (pixels, depth) = read_frame_pixels(&path)?;
        if pixels.dims() != (w, h) || depth != meta.bit_depth {
            return Err(Error::Format(format!(
                "{}: {}x{} {}-bit, manifest says {w}x{h} {}-bit",
                path.display(),
                pixels.width(),
                pixels.height(),
                depth,
                meta.bit_depth
            )));
        }
        frames.push(SpeckleFrame {
            pixels,
            pose: rec.pose,
            frame_index: rec.frame_index,
            meta,
        });
    }
    let sequence = CaptureSequence {
        schedule: manifest.frames.iter().map(|r| r.pose).collect(),
        frames,
        provenance: Provenance {
            sweep: manifest.sweep.clone(),
            master_seed: manifest.master_seed,
            surface_seed: manifest.surface_seed,
        },
    };
    sequence.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(Dataset { manifest, sequence })
}

// ---------------------------------------------------------------- calibration

const CALIB_KEYS: [&str; 7] = [
    "lambda0_m",
    "delta_lambda_m",
    "source_pos_m",
    "pitch_m",
    "residual_c1",
    "residual_c2",
    "reference_orientation_deg",
];

/// `name = value` lines; values use the shortest decimal that reads back exactly.
pub fn format_calibration(c: &CalibrationParams) -> String {
    let values = [
        c.lambda0_m,
        c.delta_lambda_m,
        c.source_pos_m,
        c.pitch_m,
        c.residual[0],
        c.residual[1],
        c.reference_orientation_deg,
    ];
    CALIB_KEYS
        .iter()
        .zip(values)
        .map(|(k, v)| format!("{k} = {v:e}\n"))
        .collect()
}

/// Parses a calibration file. Blank lines and `#` comments are ignored; every
/// key must appear exactly once.
pub fn parse_calibration(text: &str) -> Result<CalibrationParams> {
    let mut values: [Option<f64>; 7] = [None; 7];
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("calibration line {}: expected `name = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        let i = CALIB_KEYS
            .iter()
            .position(|&key| key == k)
            .ok_or_else(|| Error::Config(format!("calibration line {}: unknown key {k:?}", n + 1)))?;
        if values[i].is_some() {
            return Err(Error::Config(format!("calibration key {k:?} repeated")));
        }
        values[i] = Some(
            v.parse()
                .map_err(|_| Error::Config(format!("calibration line {}: bad number {v:?}", n + 1)))?,
        );
    }
    let get = |i: usize| values[i].ok_or_else(|| Error::Config(format!("calibration key {:?} missing", CALIB_KEYS[i])));
    let c = CalibrationParams {
        lambda0_m: get(0)?,
        delta_lambda_m: get(1)?,
        source_pos_m: get(2)?,
        pitch_m: get(3)?,
        residual: [get(4)?, get(5)?],
        reference_orientation_deg: get(6)?,
    };
    c.validate()?;
    Ok(c)
}

pub fn write_calibration(path: &Path, c: &CalibrationParams) -> Result<()> {
    write_bytes(path, format_calibration(c).as_bytes())
}

pub fn read_calibration(path: &Path) -> Result<CalibrationParams> {
    let bytes = read_bytes(path)?;
    parse_calibration(&String::from_utf8_lossy(&bytes))
}

// ---------------------------------------------------------------- weights

pub const WEIGHTS_MAGIC: &[u8; 4] = b"SPKW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

/// Named tensors plus the fingerprint of the architecture that produced them.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct WeightsFile {
    pub fingerprint: u64,
    pub tensors: Vec<TensorRecord>,
}

/// Layout: `"SPKW"`, u32 version, u32 tensor count, then per tensor a u16 name
/// length, the UTF-8 name, u8 rank, u32 dims and f32 values (row-major); the
/// file ends with the u64 architecture fingerprint. Integers little-endian.
pub fn encode_weights(w: &WeightsFile) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.tensors.len() as u32).to_le_bytes());
    for t in &w.tensors {
        let name = t.name.as_bytes();
        let n = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {}", t.name)))?;
        let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Format("tensor rank > 255".into()))?;
        if t.dims.iter().product::<usize>() != t.values.len() {
            return Err(Error::Format(format!("tensor {} dims {:?} hold {} values", t.name, t.dims, t.values.len())));
        }
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in &t.dims {
            let d = u32::try_from(d).map_err(|_| Error::Format("tensor dim > u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&w.fingerprint.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated weights file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightsFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::Format("not a weights file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("weights version {version} not supported (expected {WEIGHTS_VERSION})")));
    }
    let count = u32::from_le_bytes(r.array()?) as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let n = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(r.array()?) as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflows".into()))?)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push(TensorRecord { name, dims, values });
    }
    let fingerprint = u64::from_le_bytes(r.array()?);
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after weights", bytes.len() - r.pos)));
    }
    Ok(WeightsFile { fingerprint, tensors })
}

pub fn write_weights(path: &Path, w: &WeightsFile) -> Result<()> {
    write_bytes(path, &encode_weights(w)?)
}

pub fn read_weights(path: &Path) -> Result<WeightsFile> {
    decode_weights(&read_bytes(path)?)
}

/// Reads weights and refuses them unless they carry `expected` as fingerprint.
pub fn read_weights_checked(path: &Path, expected: u64) -> Result<WeightsFile> {
    let w = read_weights(path)?;
    if w.fingerprint != expected {
        return Err(Error::Fingerprint {
            expected,
            found: w.fingerprint,
        });
    }
    Ok(w)
}
