//! On-disk formats: sequence directories (PPM/PFM/.flo/PGM plus pose and
//! intrinsics text files) and JSON-lines map checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageDecoder, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::config::ManageConfig;
use crate::error::{Error, Result};
use crate::frame::FrameBundle;
use crate::gaussian::{Gaussian, GaussianKind, GaussianMap};
use crate::geometry::{CameraModel, Pose};
use crate::image::{DepthImage, FlowImage, Image, MaskImage, RgbImage};

pub const FLO_MAGIC: f32 = 202021.25;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const POSES_FILE: &str = "poses.txt";
pub const INTRINSICS_FILE: &str = "intrinsics.txt";

pub fn rgb_path(dir: &Path, idx: i64) -> PathBuf {
    dir.join(format!("frame_{idx:06}.rgb.ppm"))
}

pub fn depth_path(dir: &Path, idx: i64) -> PathBuf {
    dir.join(format!("frame_{idx:06}.depth.pfm"))
}

pub fn flow_path(dir: &Path, idx: i64) -> PathBuf {
    dir.join(format!("frame_{idx:06}.flow.flo"))
}

pub fn mask_path(dir: &Path, idx: i64) -> PathBuf {
    dir.join(format!("frame_{idx:06}.mask.pgm"))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::load(path, e.to_string()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::load(path, format!("write failed: {e}")))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn decode_pnm(path: &Path, magic: &[u8; 2]) -> Result<DynamicImage> {
    let bytes = read(path)?;
    if !bytes.starts_with(magic) {
        return Err(Error::load(path, format!("expected {} magic", String::from_utf8_lossy(magic))));
    }
    let dec = PnmDecoder::new(Cursor::new(bytes)).map_err(|e| Error::load(path, e.to_string()))?;
    let (w, h) = dec.dimensions();
    let mut buf = vec![0u8; dec.total_bytes() as usize];
    let color = dec.color_type();
    dec.read_image(&mut buf).map_err(|e| Error::load(path, e.to_string()))?;
    let img = match color {
        image::ColorType::Rgb8 => image::RgbImage::from_raw(w, h, buf).map(DynamicImage::ImageRgb8),
        image::ColorType::L8 => image::GrayImage::from_raw(w, h, buf).map(DynamicImage::ImageLuma8),
        other => return Err(Error::load(path, format!("unsupported sample type {other:?}, expected 8-bit"))),
    };
    img.ok_or_else(|| Error::load(path, "pixel buffer size mismatch"))
}

fn encode_pnm(path: &Path, subtype: PnmSubtype, w: usize, h: usize, buf: &[u8], color: ExtendedColorType) -> Result<()> {
    let mut out = Vec::with_capacity(buf.len() + 32);
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(buf, w as u32, h as u32, color)
        .map_err(|e| Error::load(path, e.to_string()))?;
    write(path, &out)
}

/// Binary PPM (P6), 8-bit; values are clamped to `[0, 1]` and rounded.
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let buf: Vec<u8> = img.data().iter().flat_map(|p| p.map(quantize)).collect();
    let subtype = PnmSubtype::Pixmap(SampleEncoding::Binary);
    encode_pnm(path, subtype, img.width(), img.height(), &buf, ExtendedColorType::Rgb8)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let img = decode_pnm(path, b"P6")?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
    Image::from_vec(w, h, data)
}

/// Binary PGM (P5) with 255 for set pixels.
pub fn write_mask_pgm(path: &Path, mask: &MaskImage) -> Result<()> {
    let buf: Vec<u8> = mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect();
    let subtype = PnmSubtype::Graymap(SampleEncoding::Binary);
    encode_pnm(path, subtype, mask.width(), mask.height(), &buf, ExtendedColorType::L8)
}

/// Pixels above mid-gray count as set.
pub fn read_mask_pgm(path: &Path) -> Result<MaskImage> {
    let img = decode_pnm(path, b"P5")?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Image::from_vec(w, h, img.pixels().map(|p| p.0[0] > 127).collect())
}

/// Grayscale little-endian PFM; rows are stored bottom to top.
pub fn write_pfm(path: &Path, img: &DepthImage) -> Result<()> {
    let (w, h) = img.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(img[(x, y)] as f32).to_le_bytes());
        }
    }
    write(path, &out)
}

/// Splits off `n` whitespace-separated header tokens, returning them and the
/// offset just past the single whitespace byte that ends the last one.
fn header_tokens(bytes: &[u8], n: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    (i < bytes.len()).then_some((tokens, i + 1))
}

pub fn read_pfm(path: &Path) -> Result<DepthImage> {
    let bytes = read(path)?;
    let bad = |msg: &str| Error::load(path, msg.to_string());
    let (tok, off) = header_tokens(&bytes, 4).ok_or_else(|| bad("truncated PFM header"))?;
    if tok[0] != "Pf" {
        return Err(bad("expected Pf magic (grayscale PFM)"));
    }
    let w: usize = tok[1].parse().map_err(|_| bad("bad PFM width"))?;
    let h: usize = tok[2].parse().map_err(|_| bad("bad PFM height"))?;
    let scale: f64 = tok[3].parse().map_err(|_| bad("bad PFM scale"))?;
    if scale >= 0.0 {
        return Err(bad("only little-endian PFM (negative scale) is supported"));
    }
    let body = &bytes[off..];
    if body.len() < w * h * 4 {
        return Err(bad(&format!("truncated PFM data: {} of {} bytes", body.len(), w * h * 4)));
    }
    let mut img = Image::new(w, h, 0.0);
    for (i, chunk) in body.chunks_exact(4).take(w * h).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        let (x, row) = (i % w, i / w);
        img[(x, h - 1 - row)] = v;
    }
    Ok(img)
}

/// Middlebury `.flo`: magic, width, height, then interleaved `(u, v)` f32.
pub fn write_flo(path: &Path, flow: &FlowImage) -> Result<()> {
    let (w, h) = flow.dims();
    let mut out = Vec::with_capacity(12 + w * h * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for f in flow.data() {
        out.extend_from_slice(&(f[0] as f32).to_le_bytes());
        out.extend_from_slice(&(f[1] as f32).to_le_bytes());
    }
    write(path, &out)
}

pub fn read_flo(path: &Path) -> Result<FlowImage> {
    let bytes = read(path)?;
    let bad = |msg: String| Error::load(path, msg);
    if bytes.len() < 12 {
        return Err(bad("truncated .flo header".into()));
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(bad("bad .flo magic".into()));
    }
    let (w, h) = (i32::from_le_bytes(word(4)), i32::from_le_bytes(word(8)));
    if w < 0 || h < 0 {
        return Err(bad(format!("bad .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + w * h * 8;
    if bytes.len() < need {
        return Err(bad(format!("truncated .flo data: {} of {need} bytes", bytes.len())));
    }
    let data = bytes[12..need]
        .chunks_exact(8)
        .map(|c| {
            let u = f32::from_le_bytes(c[0..4].try_into().unwrap());
            let v = f32::from_le_bytes(c[4..8].try_into().unwrap());
            [u as f64, v as f64]
        })
        .collect();
    Image::from_vec(w, h, data)
}

pub fn write_intrinsics(path: &Path, cam: &CameraModel) -> Result<()> {
    let text = format!("{} {} {} {} {} {}\n", cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height);
    write(path, text.as_bytes())
}

pub fn read_intrinsics(path: &Path) -> Result<CameraModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    let tok: Vec<&str> = text.split_whitespace().collect();
    if tok.len() != 6 {
        return Err(Error::load(path, format!("expected 6 values (fx fy cx cy width height), got {}", tok.len())));
    }
    let f = |i: usize| tok[i].parse::<f64>().map_err(|_| Error::load(path, format!("bad number {:?}", tok[i])));
    let u = |i: usize| tok[i].parse::<usize>().map_err(|_| Error::load(path, format!("bad size {:?}", tok[i])));
    CameraModel::new(f(0)?, f(1)?, f(2)?, f(3)?, u(4)?, u(5)?).map_err(|e| Error::load(path, e.to_string()))
}

/// One `idx tx ty tz qx qy qz qw` line per frame.
pub fn write_poses(path: &Path, poses: &[(i64, Pose)]) -> Result<()> {
    let mut text = String::new();
    for (idx, p) in poses {
        let (t, q) = (p.translation, p.rotation.quaternion());
        writeln!(text, "{idx} {} {} {} {} {} {} {}", t.x, t.y, t.z, q.i, q.j, q.k, q.w).unwrap();
    }
    write(path, text.as_bytes())
}

pub fn read_poses(path: &Path) -> Result<BTreeMap<i64, Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut out = BTreeMap::new();
    let mut last: Option<i64> = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::load(path, format!("line {}: {msg}", n + 1));
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 8 {
            return Err(bad(format!("expected 8 fields, got {}", tok.len())));
        }
        let idx: i64 = tok[0].parse().map_err(|_| bad(format!("bad frame index {:?}", tok[0])))?;
        if last.is_some_and(|l| idx <= l) {
            return Err(bad(format!("frame index {idx} is not increasing")));
        }
        last = Some(idx);
        let mut v = [0.0; 7];
        for (k, s) in tok[1..].iter().enumerate() {
            v[k] = s.parse().map_err(|_| bad(format!("bad number {s:?}")))?;
        }
        let pose = Pose::from_components([v[0], v[1], v[2]], v[3], v[4], v[5], v[6]).map_err(|e| bad(e.to_string()))?;
        out.insert(idx, pose);
    }
    Ok(out)
}

/// Writes `frames` in the sequence-directory layout, creating `dir`.
pub fn write_sequence(dir: &Path, cam: &CameraModel, frames: &[FrameBundle]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::load(dir, e.to_string()))?;
    write_intrinsics(&dir.join(INTRINSICS_FILE), cam)?;
    let poses: Vec<(i64, Pose)> = frames.iter().map(|f| (f.timestamp, f.pose)).collect();
    write_poses(&dir.join(POSES_FILE), &poses)?;
    for f in frames {
        let t = f.timestamp;
        write_ppm(&rgb_path(dir, t), &f.rgb)?;
        write_pfm(&depth_path(dir, t), &f.depth)?;
        if let Some(flow) = &f.flow_back {
            write_flo(&flow_path(dir, t), flow)?;
        }
        if let Some(mask) = &f.motion_mask {
            write_mask_pgm(&mask_path(dir, t), mask)?;
        }
    }
    Ok(())
}

/// An opened sequence directory; frames are decoded on demand.
#[derive(Clone, Debug)]
pub struct SequenceDir {
    pub dir: PathBuf,
    pub cam: CameraModel,
    pub poses: BTreeMap<i64, Pose>,
    /// Frame indices with an RGB file, ascending.
    pub indices: Vec<i64>,
}

impl SequenceDir {
    pub fn open(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::load(dir, "not a directory"));
        }
        let cam = read_intrinsics(&dir.join(INTRINSICS_FILE))?;
        let poses = read_poses(&dir.join(POSES_FILE))?;
        let mut indices = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::load(dir, e.to_string()))? {
            let name = entry.map_err(|e| Error::load(dir, e.to_string()))?.file_name();
            let name = name.to_string_lossy();
            if let Some(idx) = name.strip_prefix("frame_").and_then(|s| s.strip_suffix(".rgb.ppm")) {
                if let Ok(i) = idx.parse::<i64>() {
                    indices.push(i);
                }
            }
        }
        indices.sort_unstable();
        if indices.is_empty() {
            return Err(Error::load(dir, "no frame_*.rgb.ppm files"));
        }
        if let Some(i) = indices.iter().find(|i| !poses.contains_key(i)) {
            return Err(Error::load(dir.join(POSES_FILE), format!("no pose for frame {i}")));
        }
        Ok(Self { dir: dir.to_path_buf(), cam, poses, indices })
    }

    pub fn has_flow(&self) -> bool {
        self.indices.iter().any(|&i| flow_path(&self.dir, i).exists())
    }

    pub fn load_frame(&self, idx: i64) -> Result<FrameBundle> {
        let dims = (self.cam.width, self.cam.height);
        let check = |path: PathBuf, got: (usize, usize)| {
            if got == dims {
                Ok(())
            } else {
                Err(Error::load(path, format!("{}x{} does not match intrinsics {}x{}", got.0, got.1, dims.0, dims.1)))
            }
        };
        let p = rgb_path(&self.dir, idx);
        let rgb = read_ppm(&p)?;
        check(p, rgb.dims())?;
        let p = depth_path(&self.dir, idx);
        let depth = read_pfm(&p)?;
        check(p.clone(), depth.dims())?;
        if depth.data().iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::load(p, "negative or non-finite depth"));
        }
        let p = flow_path(&self.dir, idx);
        let flow_back = if p.exists() {
            let f = read_flo(&p)?;
            check(p, f.dims())?;
            Some(f)
        } else {
            None
        };
        let p = mask_path(&self.dir, idx);
        let motion_mask = if p.exists() {
            let m = read_mask_pgm(&p)?;
            check(p, m.dims())?;
            Some(m)
        } else {
            None
        };
        let pose = *self
            .poses
            .get(&idx)
            .ok_or_else(|| Error::load(self.dir.join(POSES_FILE), format!("no pose for frame {idx}")))?;
        Ok(FrameBundle { rgb, depth, pose, timestamp: idx, flow_back, motion_mask })
    }

    pub fn frames(&self) -> impl Iterator<Item = Result<FrameBundle>> + '_ {
        self.indices.iter().map(|&i| self.load_frame(i))
    }
}

/// Loads every frame of a sequence directory in index order.
pub fn load_sequence(dir: &Path) -> Result<(CameraModel, Vec<FrameBundle>)> {
    let seq = SequenceDir::open(dir)?;
    let frames = seq.frames().collect::<Result<Vec<_>>>()?;
    Ok((seq.cam, frames))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub frame_index: i64,
    pub sh_degree: u8,
    pub config: ManageConfig,
    /// Next id to hand out, so ids stay unique after a reload.
    pub next_id: u64,
}

/// Serializes `map` as JSON lines: a header, then static Gaussians followed by
/// dynamic ones. Floats use shortest round-trip decimals.
pub fn checkpoint_to_string(map: &GaussianMap) -> Result<String> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        frame_index: map.frame_index,
        sh_degree: map.config.sh_degree,
        config: map.config.clone(),
        next_id: map.next_id,
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for g in map.iter() {
        if !g.is_finite() {
            return Err(Error::InvalidParameter(format!("gaussian {} has non-finite parameters", g.id)));
        }
        out.push_str(&serde_json::to_string(g)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn checkpoint_from_str(text: &str) -> Result<GaussianMap> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| Error::Config("empty checkpoint".into()))?;
    let header: CheckpointHeader =
        serde_json::from_str(first).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!("unsupported checkpoint version {}", header.format_version)));
    }
    if header.sh_degree != header.config.sh_degree {
        return Err(Error::Config("header sh_degree disagrees with config".into()));
    }
    header.config.validate()?;
    let mut map = GaussianMap::new(header.config);
    map.frame_index = header.frame_index;
    map.next_id = header.next_id;
    for (n, line) in lines {
        let g: Gaussian =
            serde_json::from_str(line).map_err(|e| Error::Config(format!("checkpoint line {}: {e}", n + 1)))?;
        match g.kind {
            GaussianKind::Static => map.static_set.push(g),
            GaussianKind::Dynamic => map.dynamic_set.push(g),
        }
    }
    map.check_invariants()?;
    Ok(map)
}

pub fn save_checkpoint(path: &Path, map: &GaussianMap) -> Result<()> {
    write(path, checkpoint_to_string(map)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<GaussianMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    checkpoint_from_str(&text).map_err(|e| Error::load(path, e.to_string()))
}
