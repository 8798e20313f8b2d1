//! RLRF feature files and dataset manifests.
//!
//! Layout (little-endian):
//!
//! ```text
//! "RLRF" | version u32 = 1
//! image_id: u16 len + UTF-8 | class_label: u16 len + UTF-8
//! flags u8 (bit0 anomalous, bit1 has_mask)
//! image H u32 | image W u32 | scale count u8
//! per scale: C u32, H_j u32, W_j u32
//! per scale: C·H_j·W_j f32, channel-major
//! if has_mask: H·W bytes of {0,1}
//! ```
//!
//! A dataset directory holds such files plus `manifest.tsv` with one
//! `relative/path<TAB>split` line per file.

use std::fs;
use std::path::{Path, PathBuf};

use super::{FeatureError, FeatureMap, FeatureRecord, PixelMask, Result};

const MAGIC: &[u8; 4] = b"RLRF";
const VERSION: u32 = 1;
const FLAG_ANOMALOUS: u8 = 1;
const FLAG_MASK: u8 = 2;
pub const MANIFEST_NAME: &str = "manifest.tsv";

fn io_err(path: &Path, source: std::io::Error) -> FeatureError {
    FeatureError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn put_str(out: &mut Vec<u8>, s: &str, what: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| FeatureError::Invalid(format!("{what} longer than 65535 bytes")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| FeatureError::Invalid(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_feature_record(rec: &FeatureRecord) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &rec.image_id, "image_id")?;
    put_str(&mut out, &rec.class_label, "class_label")?;
    let mut flags = 0u8;
    if rec.is_anomalous {
        flags |= FLAG_ANOMALOUS;
    }
    if rec.pixel_mask.is_some() {
        flags |= FLAG_MASK;
    }
    out.push(flags);
    put_u32(&mut out, rec.image_height, "image height")?;
    put_u32(&mut out, rec.image_width, "image width")?;
    let count = u8::try_from(rec.scales.len())
        .map_err(|_| FeatureError::Invalid("more than 255 scales".into()))?;
    out.push(count);
    for fm in &rec.scales {
        put_u32(&mut out, fm.channels, "channels")?;
        put_u32(&mut out, fm.height, "height")?;
        put_u32(&mut out, fm.width, "width")?;
    }
    for fm in &rec.scales {
        for v in &fm.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(mask) = &rec.pixel_mask {
        if (mask.height, mask.width) != (rec.image_height, rec.image_width) {
            return Err(FeatureError::Invalid(format!(
                "mask {}x{} does not match image {}x{}",
                mask.height, mask.width, rec.image_height, rec.image_width
            )));
        }
        if mask.data.iter().any(|&b| b > 1) {
            return Err(FeatureError::Invalid("mask bytes must be 0 or 1".into()));
        }
        out.extend_from_slice(&mask.data);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> FeatureError {
        FeatureError::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let start = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| FeatureError::Parse {
            offset: start,
            msg: format!("{what} is not valid UTF-8"),
        })
    }
}

pub fn decode_feature_record(buf: &[u8]) -> Result<FeatureRecord> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(FeatureError::Parse {
            offset: 0,
            msg: "bad magic, expected RLRF".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FeatureError::Parse {
            offset: 4,
            msg: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let image_id = r.string("image_id")?;
    let class_label = r.string("class_label")?;
    let flags_at = r.pos;
    let flags = r.u8("flags")?;
    if flags & !(FLAG_ANOMALOUS | FLAG_MASK) != 0 {
        return Err(FeatureError::Parse {
            offset: flags_at,
            msg: format!("unknown flag bits {flags:#04x}"),
        });
    }
    let image_height = r.u32("image height")? as usize;
    let image_width = r.u32("image width")? as usize;
    let count = r.u8("scale count")? as usize;
    let mut dims = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let c = r.u32("channels")? as usize;
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let n = c
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .filter(|&n| n > 0 && n.checked_mul(4).is_some_and(|b| b <= buf.len()))
            .ok_or_else(|| FeatureError::Parse {
                offset: at,
                msg: format!("scale extents {c}x{h}x{w} are empty or exceed the file"),
            })?;
        dims.push((c, h, w, n));
    }
    let mut scales = Vec::with_capacity(count);
    for (c, h, w, n) in dims {
        let bytes = r.take(n * 4, "feature values")?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        scales.push(FeatureMap::new(c, h, w, data)?);
    }
    let pixel_mask = if flags & FLAG_MASK != 0 {
        let n = image_height
            .checked_mul(image_width)
            .filter(|&n| n > 0)
            .ok_or_else(|| r.err("mask extents are empty or overflow"))?;
        let at = r.pos;
        let bytes = r.take(n, "pixel mask")?;
        if let Some(i) = bytes.iter().position(|&b| b > 1) {
            return Err(FeatureError::Parse {
                offset: at + i,
                msg: format!("mask byte {} is not 0 or 1", bytes[i]),
            });
        }
        Some(PixelMask {
            height: image_height,
            width: image_width,
            data: bytes.to_vec(),
        })
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(FeatureRecord {
        image_id,
        class_label,
        is_anomalous: flags & FLAG_ANOMALOUS != 0,
        image_height,
        image_width,
        pixel_mask,
        scales,
    })
}

pub fn write_feature_file(rec: &FeatureRecord, path: &Path) -> Result<()> {
    let bytes = encode_feature_record(rec)?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureRecord> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_feature_record(&bytes).map_err(|e| match e {
        FeatureError::Parse { offset, msg } => FeatureError::Parse {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        let p = e.path.to_str().ok_or_else(|| {
            FeatureError::Invalid(format!("non UTF-8 path {}", e.path.display()))
        })?;
        if p.contains('\t') || p.contains('\n') {
            return Err(FeatureError::Invalid(format!("path {p:?} contains a tab or newline")));
        }
        text.push_str(p);
        text.push('\t');
        text.push_str(e.split.as_str());
        text.push('\n');
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (p, split) = line.split_once('\t').ok_or_else(|| {
            FeatureError::Invalid(format!("{}:{}: expected path<TAB>split", path.display(), i + 1))
        })?;
        let split = Split::parse(split.trim()).ok_or_else(|| {
            FeatureError::Invalid(format!("{}:{}: unknown split {split:?}", path.display(), i + 1))
        })?;
        entries.push(ManifestEntry {
            path: PathBuf::from(p),
            split,
        });
    }
    Ok(entries)
}

/// Writes every record as `<split>/<image_id>.rlrf` plus the manifest.
pub fn write_dataset(dir: &Path, train: &[FeatureRecord], test: &[FeatureRecord]) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::with_capacity(train.len() + test.len());
    for (split, records) in [(Split::Train, train), (Split::Test, test)] {
        let sub = dir.join(split.as_str());
        fs::create_dir_all(&sub).map_err(|e| io_err(&sub, e))?;
        for rec in records {
            if rec.image_id.contains(['/', '\\', '\t', '\n']) || rec.image_id.starts_with('.') {
                return Err(FeatureError::Invalid(format!(
                    "image_id {:?} is not usable as a file name",
                    rec.image_id
                )));
            }
            let rel = PathBuf::from(split.as_str()).join(format!("{}.rlrf", rec.image_id));
            write_feature_file(rec, &dir.join(&rel))?;
            entries.push(ManifestEntry { path: rel, split });
        }
    }
    write_manifest(dir, &entries)?;
    Ok(entries)
}

/// Reads every record of one split, in manifest order.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<FeatureRecord>> {
    read_manifest(dir)?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| read_feature_file(&dir.join(&e.path)))
        .collect()
}
