//! On-disk formats.
//!
//! * Scene: `SGS1` little-endian binary (`u32 count, u32 d, u32 d_c, f64 median_depth`
//!   then per primitive the f64 fields in declaration order), or a JSON twin.
//!   A primitive without compressed features stores `d_c` NaNs in that slot.
//! * Camera: JSON with `fx, fy, cx, cy, width, height, rotation` (9 row-major)
//!   and `translation`.
//! * Images: binary PPM (`P6`, 8-bit) and `FMAP` float maps
//!   (`u32 w, u32 h, u32 c`, then row-major f32).

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Camera, GaussianPrimitive, GaussianScene, ImageBuffer, Quat, Vec3};
use crate::semantic::{FeatureCodec, PrototypeSet};

pub const SCENE_MAGIC: &[u8; 4] = b"SGS1";
pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
const SCENE_HEADER_LEN: usize = 4 + 4 * 3 + 8;
/// f64 slots per primitive besides the two feature vectors.
const FIXED_FIELDS: usize = 3 + 1 + 1 + 3 + 3 + 3 + 4 + 4;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

/// Little-endian cursor that reports the byte offset of any failure.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(
                self.path,
                self.pos,
                format!("unexpected end of file (need {n} bytes)"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }

    fn quat(&mut self) -> Result<Quat> {
        Ok(Quat::new(self.f64()?, self.f64()?, self.f64()?, self.f64()?))
    }
}

pub fn encode_scene(scene: &GaussianScene) -> Result<Vec<u8>> {
    let (d, dc) = (scene.sem_dim, scene.compressed_dim);
    let mut out =
        Vec::with_capacity(SCENE_HEADER_LEN + scene.len() * (FIXED_FIELDS + d + dc) * 8);
    out.extend_from_slice(SCENE_MAGIC);
    for v in [scene.len(), d, dc] {
        let v = u32::try_from(v).map_err(|_| Error::InvalidConfig("scene too large".into()))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&scene.median_depth.to_le_bytes());
    for (i, p) in scene.primitives.iter().enumerate() {
        if p.sem_feature.len() != d || p.sem_compressed.as_ref().is_some_and(|c| c.len() != dc) {
            return Err(Error::mismatch("scene primitive features", format!("{d}/{dc}"), i));
        }
        let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        p.center.iter().for_each(|&v| put(v));
        put(p.opacity_raw);
        put(p.opacity);
        p.color.iter().for_each(|&v| put(v));
        p.scale_raw.iter().for_each(|&v| put(v));
        p.scale.iter().for_each(|&v| put(v));
        p.rotation_raw.iter().for_each(|&v| put(v));
        p.rotation.iter().for_each(|&v| put(v));
        p.sem_feature.iter().for_each(|&v| put(v));
        match &p.sem_compressed {
            Some(c) => c.iter().for_each(|&v| put(v)),
            None => (0..dc).for_each(|_| put(f64::NAN)),
        }
    }
    Ok(out)
}

pub fn decode_scene(bytes: &[u8], path: &Path) -> Result<GaussianScene> {
    let mut r = Reader { bytes, path, pos: 0 };
    if r.take(4)? != SCENE_MAGIC {
        return Err(format_err(path, 0, "bad magic, expected SGS1"));
    }
    let count = r.u32()? as usize;
    let d = r.u32()? as usize;
    let dc = r.u32()? as usize;
    let median_depth = r.f64()?;
    let record = (FIXED_FIELDS + d + dc) * 8;
    let expected = SCENE_HEADER_LEN + count * record;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len().min(expected),
            format!("file is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let mut scene = GaussianScene::new(d, dc, median_depth);
    for _ in 0..count {
        let center = r.vec3()?;
        let opacity_raw = r.f64()?;
        let opacity = r.f64()?;
        let color = r.vec3()?;
        let scale_raw = r.vec3()?;
        let scale = r.vec3()?;
        let rotation_raw = r.quat()?;
        let rotation = r.quat()?;
        let sem_feature = (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let compressed = (0..dc).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let sem_compressed = if dc > 0 && compressed.iter().all(|v| v.is_nan()) {
            None
        } else {
            Some(compressed)
        };
        scene.primitives.push(GaussianPrimitive {
            center,
            opacity_raw,
            opacity,
            color,
            scale_raw,
            scale,
            rotation_raw,
            rotation,
            sem_feature,
            sem_compressed,
        });
    }
    Ok(scene)
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Writes a scene as `SGS1` binary, or as JSON when the path ends in `.json`.
pub fn write_scene(path: &Path, scene: &GaussianScene) -> Result<()> {
    if is_json(path) {
        write_json(path, scene)
    } else {
        write_file(path, &encode_scene(scene)?)
    }
}

pub fn read_scene(path: &Path) -> Result<GaussianScene> {
    if is_json(path) {
        read_json(path)
    } else {
        decode_scene(&read_file(path)?, path)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Camera> for CameraFile {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl From<CameraFile> for Camera {
    fn from(f: CameraFile) -> Self {
        Camera {
            fx: f.fx,
            fy: f.fy,
            cx: f.cx,
            cy: f.cy,
            width: f.width,
            height: f.height,
            rotation: Matrix3::from_row_slice(&f.rotation),
            translation: Vec3::from(f.translation),
        }
    }
}

pub fn write_camera(path: &Path, camera: &Camera) -> Result<()> {
    write_json(path, &CameraFile::from(camera))
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    let cam: Camera = read_json::<CameraFile>(path)?.into();
    cam.validate()?;
    Ok(cam)
}

/// Binary PPM of a 3-channel image, values clamped to `[0, 1]` and rounded.
pub fn encode_ppm(img: &ImageBuffer) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::mismatch("ppm channels", 3, img.channels));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<(String, usize)> {
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
            return Err(format_err(path, start, "truncated PPM header"));
        }
        Ok((String::from_utf8_lossy(&bytes[start..*pos]).into_owned(), start))
    };
    let (magic, _) = token(&mut pos)?;
    if magic != "P6" {
        return Err(format_err(path, 0, "expected P6 magic"));
    }
    let num = |pos: &mut usize| -> Result<usize> {
        let (t, at) = token(pos)?;
        t.parse().map_err(|_| format_err(path, at, format!("bad header number {t:?}")))
    };
    let width = num(&mut pos)?;
    let height = num(&mut pos)?;
    let maxval = num(&mut pos)?;
    if maxval != 255 {
        return Err(format_err(path, pos, "only 8-bit PPM (maxval 255) is supported"));
    }
    pos += 1;
    let n = width * height * 3;
    if bytes.len() < pos + n {
        return Err(format_err(path, bytes.len(), "truncated PPM pixel data"));
    }
    let data = bytes[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
    ImageBuffer::from_data(width, height, 3, data)
}

pub fn write_ppm(path: &Path, img: &ImageBuffer) -> Result<()> {
    write_file(path, &encode_ppm(img)?)
}

pub fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    decode_ppm(&read_file(path)?, path)
}

pub fn encode_fmap(img: &ImageBuffer) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data.len() * 4);
    out.extend_from_slice(FMAP_MAGIC);
    for v in [img.width, img.height, img.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in &img.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_fmap(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let mut r = Reader { bytes, path, pos: 0 };
    if r.take(4)? != FMAP_MAGIC {
        return Err(format_err(path, 0, "bad magic, expected FMAP"));
    }
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let c = r.u32()? as usize;
    let n = w * h * c;
    if bytes.len() != 16 + n * 4 {
        return Err(format_err(
            path,
            bytes.len().min(16 + n * 4),
            format!("file is {} bytes, header implies {}", bytes.len(), 16 + n * 4),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos;
        let v = r.f32()?;
        if !v.is_finite() {
            return Err(format_err(path, at, "non-finite value"));
        }
        data.push(v as f64);
    }
    ImageBuffer::from_data(w, h, c, data)
}

pub fn write_fmap(path: &Path, img: &ImageBuffer) -> Result<()> {
    write_file(path, &encode_fmap(img))
}

pub fn read_fmap(path: &Path) -> Result<ImageBuffer> {
    decode_fmap(&read_file(path)?, path)
}

/// Rounds every element to the nearest f32, the precision of FMAP files.
pub fn quantize_f32(img: &ImageBuffer) -> ImageBuffer {
    ImageBuffer {
        data: img.data.iter().map(|&v| v as f32 as f64).collect(),
        ..img.clone()
    }
}

fn matrix_to_image(m: &DMatrix<f64>) -> ImageBuffer {
    let data = (0..m.nrows())
        .flat_map(|r| (0..m.ncols()).map(move |c| (r, c)))
        .map(|(r, c)| m[(r, c)])
        .collect();
    ImageBuffer {
        width: m.ncols(),
        height: m.nrows(),
        channels: 1,
        data,
    }
}

fn image_to_matrix(img: &ImageBuffer, path: &Path) -> Result<DMatrix<f64>> {
    if img.channels != 1 {
        return Err(format_err(path, 12, "matrix maps must have one channel"));
    }
    Ok(DMatrix::from_row_slice(img.height, img.width, &img.data))
}

fn sibling(base: &Path, name: &str) -> PathBuf {
    base.parent().unwrap_or(Path::new(".")).join(name)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodecManifest {
    pub sem_dim: usize,
    pub compressed_dim: usize,
    pub enc_weight: String,
    pub enc_bias: String,
    pub dec_weight: String,
    pub dec_bias: String,
}

/// Writes the manifest at `path` and the four parameter blocks next to it.
pub fn write_codec(path: &Path, codec: &FeatureCodec) -> Result<()> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("codec");
    let name = |part: &str| format!("{stem}.{part}.fmap");
    let manifest = CodecManifest {
        sem_dim: codec.sem_dim(),
        compressed_dim: codec.compressed_dim(),
        enc_weight: name("enc_weight"),
        enc_bias: name("enc_bias"),
        dec_weight: name("dec_weight"),
        dec_bias: name("dec_bias"),
    };
    let col = |v: &DVector<f64>| matrix_to_image(&DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
    write_fmap(&sibling(path, &manifest.enc_weight), &matrix_to_image(&codec.enc_weight))?;
    write_fmap(&sibling(path, &manifest.enc_bias), &col(&codec.enc_bias))?;
    write_fmap(&sibling(path, &manifest.dec_weight), &matrix_to_image(&codec.dec_weight))?;
    write_fmap(&sibling(path, &manifest.dec_bias), &col(&codec.dec_bias))?;
    write_json(path, &manifest)
}

pub fn read_codec(path: &Path) -> Result<FeatureCodec> {
    let m: CodecManifest = read_json(path)?;
    let load = |name: &str| -> Result<DMatrix<f64>> {
        let p = sibling(path, name);
        image_to_matrix(&read_fmap(&p)?, &p)
    };
    let column = |name: &str| -> Result<DVector<f64>> {
        let mat = load(name)?;
        Ok(DVector::from_column_slice(mat.as_slice()))
    };
    let codec = FeatureCodec::new(
        load(&m.enc_weight)?,
        column(&m.enc_bias)?,
        load(&m.dec_weight)?,
        column(&m.dec_bias)?,
    )?;
    if codec.sem_dim() != m.sem_dim || codec.compressed_dim() != m.compressed_dim {
        return Err(Error::mismatch(
            "codec manifest",
            format!("{}->{}", m.sem_dim, m.compressed_dim),
            format!("{}->{}", codec.sem_dim(), codec.compressed_dim()),
        ));
    }
    Ok(codec)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrototypeManifest {
    pub labels: Vec<String>,
    pub dim: usize,
    pub matrix: String,
}

pub fn write_prototypes(path: &Path, protos: &PrototypeSet) -> Result<()> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("prototypes");
    let manifest = PrototypeManifest {
        labels: protos.labels.clone(),
        dim: protos.dim(),
        matrix: format!("{stem}.fmap"),
    };
    write_fmap(&sibling(path, &manifest.matrix), &matrix_to_image(&protos.prototypes))?;
    write_json(path, &manifest)
}

pub fn read_prototypes(path: &Path) -> Result<PrototypeSet> {
    let m: PrototypeManifest = read_json(path)?;
    let p = sibling(path, &m.matrix);
    let matrix = image_to_matrix(&read_fmap(&p)?, &p)?;
    if matrix.ncols() != m.dim {
        return Err(Error::mismatch("prototype dim", m.dim, matrix.ncols()));
    }
    PrototypeSet::new(matrix, m.labels)
}
