//! On-disk formats: ASCII PLY points, ASCII OBJ meshes, PNG and PFM images,
//! camera JSON, and the "DIGS" tensor container used for checkpoints.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Camera, ImageBuffer, Mat3, Vec3};
use crate::synth::{AnalyticScene, SyntheticDataset};
use crate::tape::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DIGS";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes named tensors: magic, version, count, then per tensor a
/// length-prefixed UTF-8 name, rows, cols and little-endian f32 values.
pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
        out.push((name, Tensor::from_vec(rows, cols, data)));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_tensors(tensors))?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_tensors(&fs::read(path)?)
}

/// Splits an f64 into four exactly representable 16-bit chunks, so metadata
/// survives the f32 container bit for bit.
pub fn f64_to_chunks(x: f64) -> [f64; 4] {
    let b = x.to_bits();
    [0, 16, 32, 48].map(|s| ((b >> s) & 0xffff) as f64)
}

pub fn f64_from_chunks(c: &[f64]) -> f64 {
    let mut b = 0u64;
    for (i, &v) in c.iter().take(4).enumerate() {
        b |= (v as u64 & 0xffff) << (16 * i);
    }
    f64::from_bits(b)
}

fn ply_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Writes `x y z [r g b]` vertices; colors in [0, 1] are stored as bytes.
pub fn write_ply_points(path: &Path, points: &[Vec3], colors: Option<&[Vec3]>) -> Result<()> {
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(Error::InvalidInput(format!("{} colors for {} points", c.len(), points.len())));
        }
    }
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if colors.is_some() {
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in points.iter().enumerate() {
        write!(w, "{} {} {}", p.x, p.y, p.z)?;
        if let Some(c) = colors {
            let b = c[i].map(to_byte);
            write!(w, " {} {} {}", b.x, b.y, b.z)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an ASCII PLY vertex element; returns points and, when present, colors in [0, 1].
pub fn read_ply_points(path: &Path) -> Result<(Vec<Vec3>, Option<Vec<Vec3>>)> {
    let reader = BufReader::new(fs::File::open(path)?);
    parse_ply_points(reader)
}

pub fn parse_ply_points(reader: impl BufRead) -> Result<(Vec<Vec3>, Option<Vec<Vec3>>)> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = move || -> Result<Option<(usize, String)>> {
        match lines.next() {
            Some((n, Ok(l))) => Ok(Some((n, l))),
            Some((_, Err(e))) => Err(e.into()),
            None => Ok(None),
        }
    };
    match next()? {
        Some((_, l)) if l.trim() == "ply" => {}
        Some((n, _)) => return Err(ply_err(n, "missing 'ply' magic")),
        None => return Err(ply_err(1, "empty file")),
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut last = 1;
    loop {
        let Some((n, line)) = next()? else {
            return Err(ply_err(last + 1, "header ended without end_header"));
        };
        last = n;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => {}
            ["format", f, ..] => return Err(ply_err(n, format!("unsupported format '{f}'"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", c] => {
                count = Some(c.parse().map_err(|_| ply_err(n, format!("bad vertex count '{c}'")))?);
                in_vertex = true;
            }
            ["element", _, c] => {
                let c: usize = c.parse().map_err(|_| ply_err(n, format!("bad element count '{c}'")))?;
                if c > 0 {
                    return Err(ply_err(n, "only the vertex element may hold data"));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => return Err(ply_err(n, "list property on vertex")),
            ["property", _, name] => {
                if in_vertex {
                    props.push(name.to_string());
                }
            }
            ["property", ..] => return Err(ply_err(n, "malformed property line")),
            ["end_header"] => break,
            _ => return Err(ply_err(n, format!("unexpected header line '{line}'"))),
        }
    }
    let count = count.ok_or_else(|| ply_err(last, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (Some(ix), Some(iy), Some(iz)) = (col("x"), col("y"), col("z")) else {
        return Err(ply_err(last, "vertex element lacks x, y, z"));
    };
    let rgb = match (col("red").or(col("r")), col("green").or(col("g")), col("blue").or(col("b"))) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let mut points = Vec::with_capacity(count);
    let mut colors = rgb.map(|_| Vec::with_capacity(count));
    while points.len() < count {
        let Some((n, line)) = next()? else {
            return Err(ply_err(last + 1, format!("header declares {count} vertices, body has {}", points.len())));
        };
        last = n;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| ply_err(n, format!("bad number '{t}'"))))
            .collect::<Result<_>>()?;
        if vals.len() != props.len() {
            return Err(ply_err(n, format!("expected {} values, found {}", props.len(), vals.len())));
        }
        points.push(Vec3::new(vals[ix], vals[iy], vals[iz]));
        if let (Some(c), Some([r, g, b])) = (colors.as_mut(), rgb) {
            c.push(Vec3::new(vals[r], vals[g], vals[b]) / 255.0);
        }
    }
    while let Some((n, line)) = next()? {
        if !line.trim().is_empty() {
            return Err(ply_err(n, format!("more vertex lines than the declared {count}")));
        }
    }
    Ok((points, colors))
}

/// Writes `v` and 1-based `f` records.
pub fn write_obj(path: &Path, vertices: &[Vec3], triangles: &[[usize; 3]]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for v in vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for t in triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `v` and `f` records; polygons are fan-triangulated, `v/t/n` indices
/// keep only the vertex part.
pub fn read_obj(path: &Path) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let c: Vec<f64> = tok
                    .take(3)
                    .map(|t| t.parse().map_err(|_| ply_err(n, format!("bad coordinate '{t}'"))))
                    .collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(ply_err(n, "vertex needs three coordinates"));
                }
                verts.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = tok
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let k: i64 = head.parse().map_err(|_| ply_err(n, format!("bad index '{t}'")))?;
                        let k = if k < 0 { verts.len() as i64 + k } else { k - 1 };
                        if k < 0 || k as usize >= verts.len() {
                            return Err(ply_err(n, format!("index {t} out of range")));
                        }
                        Ok(k as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(ply_err(n, "face needs three vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok((verts, faces))
}

/// 8-bit PNG; 1 channel is written as grayscale, 3 as RGB.
pub fn write_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_byte(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let res = match img.channels {
        1 => image::GrayImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        3 => image::RgbImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        c => return Err(Error::Image(format!("cannot write {c}-channel PNG"))),
    };
    res.ok_or_else(|| Error::Image("buffer size mismatch".into()))?.map_err(|e| Error::Image(e.to_string()))
}

pub fn read_png(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    ImageBuffer::from_data(w as usize, h as usize, 3, data)
}

/// Little-endian PFM (`Pf` for 1 channel, `PF` for 3), rows stored bottom to top.
pub fn write_pfm(path: &Path, img: &ImageBuffer) -> Result<()> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Image(format!("cannot write {c}-channel PFM"))),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for &v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    // three whitespace-separated header tokens, then the raster after one whitespace byte
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields.len() < 4 {
        return Err(Error::Image("truncated PFM header".into()));
    }
    let channels = match fields[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(Error::Image(format!("bad PFM tag '{t}'"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Image(format!("bad PFM size '{s}'")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let scale: f64 = fields[3].parse().map_err(|_| Error::Image("bad PFM scale".into()))?;
    let need = w * h * channels * 4;
    if bytes.len() < pos + need {
        return Err(Error::Image("truncated PFM raster".into()));
    }
    let raw: Vec<f64> = bytes[pos..pos + need]
        .chunks_exact(4)
        .map(|b| {
            let a: [u8; 4] = b.try_into().expect("4 bytes");
            (if scale < 0.0 { f32::from_le_bytes(a) } else { f32::from_be_bytes(a) }) as f64
        })
        .collect();
    let row = w * channels;
    let mut data = Vec::with_capacity(raw.len());
    for y in (0..h).rev() {
        data.extend_from_slice(&raw[y * row..(y + 1) * row]);
    }
    // depth maps carry +inf for misses, so no finiteness check here
    Ok(ImageBuffer { width: w, height: h, channels, data })
}

/// One camera with row-major world-to-camera rotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl CameraRecord {
    pub fn from_camera(c: &Camera) -> CameraRecord {
        let r = &c.rotation;
        CameraRecord {
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        Camera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            Mat3::from_row_slice(&self.rotation),
            Vec3::from(self.translation),
        )
    }
}

/// Contents of `cameras.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    /// Analytic scene name, when the data is synthetic.
    pub scene: Option<String>,
    pub cameras: Vec<CameraRecord>,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Writes a dataset directory: `cameras.json`, `points.ply`, `view_NNN.png`
/// per camera, and PFM color, depth and normal maps.
pub fn write_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let file = CameraFile {
        scene: Some(ds.scene.name.clone()),
        cameras: ds.cameras.iter().map(CameraRecord::from_camera).collect(),
        train: ds.train.clone(),
        eval: ds.eval.clone(),
    };
    write_json(&dir.join("cameras.json"), &file)?;
    write_ply_points(&dir.join("points.ply"), &ds.sparse_points, Some(&ds.sparse_colors))?;
    for i in 0..ds.cameras.len() {
        write_png(&dir.join(format!("view_{i:03}.png")), &ds.images[i])?;
        write_pfm(&dir.join(format!("color_{i:03}.pfm")), &ds.images[i])?;
        write_pfm(&dir.join(format!("depth_{i:03}.pfm")), &ds.depths[i])?;
        write_pfm(&dir.join(format!("normal_{i:03}.pfm")), &ds.normals[i])?;
    }
    Ok(())
}

/// Reads a directory written by [`write_dataset`]. Colors come from the PFM
/// files when present, else from the PNGs. Depth and normal maps are optional.
pub fn read_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let file: CameraFile = read_json(&dir.join("cameras.json"))?;
    let scene = match &file.scene {
        Some(name) => AnalyticScene::by_name(name)?,
        None => return Err(Error::InvalidInput("cameras.json names no scene".into())),
    };
    let cameras: Vec<Camera> = file.cameras.iter().map(CameraRecord::to_camera).collect::<Result<_>>()?;
    let (points, colors) = read_ply_points(&dir.join("points.ply"))?;
    let mut images = Vec::new();
    let mut depths = Vec::new();
    let mut normals = Vec::new();
    for (i, cam) in cameras.iter().enumerate() {
        let pfm = dir.join(format!("color_{i:03}.pfm"));
        let img = if pfm.exists() { read_pfm(&pfm)? } else { read_png(&dir.join(format!("view_{i:03}.png")))? };
        if img.width != cam.width || img.height != cam.height {
            return Err(Error::InvalidInput(format!("view {i}: image size does not match its camera")));
        }
        images.push(img);
        let d = dir.join(format!("depth_{i:03}.pfm"));
        depths.push(if d.exists() { read_pfm(&d)? } else { ImageBuffer::filled(cam.width, cam.height, 1, f64::INFINITY) });
        let nm = dir.join(format!("normal_{i:03}.pfm"));
        normals.push(if nm.exists() { read_pfm(&nm)? } else { ImageBuffer::new(cam.width, cam.height, 3) });
    }
    let n = points.len();
    for &i in file.train.iter().chain(&file.eval) {
        if i >= cameras.len() {
            return Err(Error::InvalidInput(format!("split index {i} out of range")));
        }
    }
    Ok(SyntheticDataset {
        scene,
        cameras,
        images,
        depths,
        normals,
        sparse_points: points,
        sparse_colors: colors.unwrap_or_else(|| vec![Vec3::repeat(0.5); n]),
        train: file.train,
        eval: file.eval,
    })
}
