//! LVUF / LVUQ / LVUC binary containers. Every field is little-endian.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{FeatureVector, TokenGrid};
use crate::pipeline::{CompressedToken, CompressedTokenSequence, CompressionStats};
use crate::queryselect::{QueryEmbedding, ResolutionLevel};
use crate::temporal::FrameFeatureSequence;

pub const FEATURE_MAGIC: &[u8; 4] = b"LVUF";
pub const QUERY_MAGIC: &[u8; 4] = b"LVUQ";
pub const COMPRESSED_MAGIC: &[u8; 4] = b"LVUC";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub const FEATURE_HEADER_LEN: usize = 28;
pub const QUERY_HEADER_LEN: usize = 17;

/// Bytes of one LVUC token record with vectors of length `dim`.
pub fn record_len(dim: usize) -> usize {
    4 + 4 + 2 + 2 + 1 + 4 * dim
}

/// Decoded LVUC file.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedFile {
    pub tokens: CompressedTokenSequence,
    pub stats: CompressionStats,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                malformed(format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| malformed("size overflow"))?)?;
        let out: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(malformed("payload contains a non-finite value"));
        }
        Ok(out)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(malformed(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(malformed(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn dtype(&mut self) -> Result<()> {
        match self.u8()? {
            DTYPE_F32 => Ok(()),
            other => Err(malformed(format!("unsupported dtype {other}"))),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| malformed(format!("{what} {v} does not fit in u32")))
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| malformed(format!("{what} {v} does not fit in u16")))
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_features(seq: &FrameFeatureSequence) -> Result<Vec<u8>> {
    let (h, w, d) = seq.grid_shape();
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + seq.len() * h * w * d * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [seq.len(), h, w, d] {
        out.extend_from_slice(&to_u32(v, "dimension")?.to_le_bytes());
    }
    out.push(DTYPE_F32);
    out.extend_from_slice(&[0; 3]);
    for f in seq.frames() {
        put_f32s(&mut out, f.data());
    }
    Ok(out)
}

/// Frame `i` is placed at timestep `i`.
pub fn decode_features(buf: &[u8]) -> Result<FrameFeatureSequence> {
    let mut r = Reader::new(buf);
    r.magic(FEATURE_MAGIC)?;
    let t = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let d = r.u32()? as usize;
    r.dtype()?;
    if r.take(3)? != [0, 0, 0] {
        return Err(malformed("reserved header bytes must be zero"));
    }
    if t == 0 || h == 0 || w == 0 || d == 0 {
        return Err(malformed(format!("empty shape {t}x{h}x{w}x{d}")));
    }
    let per_frame = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| malformed("size overflow"))?;
    let expected = per_frame
        .checked_mul(t)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| malformed("size overflow"))?;
    if buf.len() - FEATURE_HEADER_LEN != expected {
        return Err(malformed(format!(
            "payload is {} bytes, header implies {expected}",
            buf.len() - FEATURE_HEADER_LEN
        )));
    }
    let frames = (0..t)
        .map(|_| TokenGrid::new(h, w, d, r.f32s(per_frame)?))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    FrameFeatureSequence::at_one_fps(frames)
}

pub fn encode_query(q: &QueryEmbedding) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(QUERY_HEADER_LEN + q.len() * q.dim() * 4);
    out.extend_from_slice(QUERY_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(q.len(), "query length")?.to_le_bytes());
    out.extend_from_slice(&to_u32(q.dim(), "query dim")?.to_le_bytes());
    out.push(DTYPE_F32);
    for row in q.rows() {
        put_f32s(&mut out, row.as_slice());
    }
    Ok(out)
}

pub fn decode_query(buf: &[u8]) -> Result<QueryEmbedding> {
    let mut r = Reader::new(buf);
    r.magic(QUERY_MAGIC)?;
    let l_q = r.u32()? as usize;
    let d_q = r.u32()? as usize;
    r.dtype()?;
    if l_q == 0 || d_q == 0 {
        return Err(malformed(format!("empty query {l_q}x{d_q}")));
    }
    let n = l_q
        .checked_mul(d_q)
        .ok_or_else(|| malformed("size overflow"))?;
    if (buf.len() - QUERY_HEADER_LEN) as u128 != n as u128 * 4 {
        return Err(malformed(format!(
            "payload is {} bytes, header implies {}",
            buf.len() - QUERY_HEADER_LEN,
            n as u128 * 4
        )));
    }
    let data = r.f32s(n)?;
    r.finish()?;
    QueryEmbedding::from_flat(l_q, d_q, &data)
}

pub fn encode_compressed(
    tokens: &CompressedTokenSequence,
    stats: &CompressionStats,
) -> Result<Vec<u8>> {
    let dim = tokens.dim().unwrap_or(0);
    let json = serde_json::to_vec(stats).map_err(|e| malformed(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + tokens.total_count() * record_len(dim) + 4 + json.len());
    out.extend_from_slice(COMPRESSED_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(tokens.total_count(), "token count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(dim, "token dim")?.to_le_bytes());
    for t in &tokens.tokens {
        if t.vector.len() != dim {
            return Err(Error::DimMismatch(dim, t.vector.len()));
        }
        out.extend_from_slice(&to_u32(t.frame_original_index, "frame index")?.to_le_bytes());
        out.extend_from_slice(&(t.timestep as f32).to_le_bytes());
        out.extend_from_slice(&to_u16(t.grid_h, "grid row")?.to_le_bytes());
        out.extend_from_slice(&to_u16(t.grid_w, "grid column")?.to_le_bytes());
        out.push(t.level.code());
        put_f32s(&mut out, t.vector.as_slice());
    }
    out.extend_from_slice(&to_u32(json.len(), "stats length")?.to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

/// Timesteps are stored as f32 and come back widened.
pub fn decode_compressed(buf: &[u8]) -> Result<CompressedFile> {
    let mut r = Reader::new(buf);
    r.magic(COMPRESSED_MAGIC)?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if count > 0 && dim == 0 {
        return Err(malformed("tokens present but dim is 0"));
    }
    let needed = (count as u128) * (record_len(dim) as u128);
    if needed > (buf.len() as u128) {
        return Err(malformed(format!(
            "{count} records of dim {dim} exceed file size {}",
            buf.len()
        )));
    }
    let mut tokens = Vec::with_capacity(count);
    for _ in 0..count {
        let frame_original_index = r.u32()? as usize;
        let timestep = f64::from(r.f32()?);
        if !timestep.is_finite() {
            return Err(malformed("non-finite timestep"));
        }
        let grid_h = r.u16()? as usize;
        let grid_w = r.u16()? as usize;
        let code = r.u8()?;
        let level = ResolutionLevel::from_code(code)
            .ok_or_else(|| malformed(format!("unknown resolution level {code}")))?;
        let vector = FeatureVector::new(r.f32s(dim)?)?;
        tokens.push(CompressedToken {
            frame_original_index,
            timestep,
            grid_h,
            grid_w,
            level,
            vector,
        });
    }
    let len = r.u32()? as usize;
    let stats =
        serde_json::from_slice(r.take(len)?).map_err(|e| malformed(format!("stats blob: {e}")))?;
    r.finish()?;
    Ok(CompressedFile {
        tokens: CompressedTokenSequence { tokens },
        stats,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| malformed(format!("cannot read {}: {e}", path.display())))
}

pub fn read_features(path: &Path) -> Result<FrameFeatureSequence> {
    decode_features(&read(path)?)
}

pub fn read_query(path: &Path) -> Result<QueryEmbedding> {
    decode_query(&read(path)?)
}

pub fn read_compressed(path: &Path) -> Result<CompressedFile> {
    decode_compressed(&read(path)?)
}

/// Writes through a temp file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video() -> FrameFeatureSequence {
        let frames = (0..3)
            .map(|t| {
                TokenGrid::from_fn(2, 3, 4, |h, w, d| {
                    (t * 100 + h * 10 + w) as f32 + d as f32 * 0.25
                })
            })
            .collect::<Result<Vec<_>>>()
            .unwrap();
        FrameFeatureSequence::at_one_fps(frames).unwrap()
    }

    #[test]
    fn feature_header_layout() {
        let bytes = encode_features(&video()).unwrap();
        assert_eq!(&bytes[..4], b"LVUF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &3u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &4u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &[0, 0, 0, 0]);
        assert_eq!(bytes.len(), 28 + 3 * 2 * 3 * 4 * 4);
        // first payload value is frame 0, token (0,0), channel 0
        assert_eq!(&bytes[28..32], &0f32.to_le_bytes());
        assert_eq!(&bytes[32..36], &0.25f32.to_le_bytes());
    }

    #[test]
    fn features_round_trip() {
        let v = video();
        let back = decode_features(&encode_features(&v).unwrap()).unwrap();
        assert_eq!(back.frames(), v.frames());
        assert_eq!(back.timesteps(), v.timesteps());
    }

    #[test]
    fn feature_corruption_is_rejected() {
        let good = encode_features(&video()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_features(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[24] = 1;
        assert!(matches!(decode_features(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[26] = 1;
        assert!(matches!(decode_features(&bad), Err(Error::Format(_))));
        assert!(matches!(
            decode_features(&good[..good.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_features(&long), Err(Error::Format(_))));
        let mut nan = good;
        nan[28..32].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_features(&nan), Err(Error::Format(_))));
        assert!(decode_features(&[]).is_err());
    }

    #[test]
    fn query_round_trip() {
        let q = QueryEmbedding::from_flat(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let bytes = encode_query(&q).unwrap();
        assert_eq!(bytes.len(), 17 + 24);
        assert_eq!(&bytes[..4], b"LVUQ");
        assert_eq!(bytes[16], 0);
        assert_eq!(decode_query(&bytes).unwrap(), q);
        assert!(decode_query(&bytes[..20]).is_err());
    }

    #[test]
    fn compressed_round_trip() {
        let tokens = CompressedTokenSequence {
            tokens: vec![
                CompressedToken {
                    frame_original_index: 4,
                    timestep: 4.0,
                    grid_h: 1,
                    grid_w: 2,
                    level: ResolutionLevel::Pooled,
                    vector: FeatureVector::new(vec![0.5, -1.5]).unwrap(),
                },
                CompressedToken {
                    frame_original_index: 9,
                    timestep: 9.0,
                    grid_h: 11,
                    grid_w: 0,
                    level: ResolutionLevel::Full,
                    vector: FeatureVector::new(vec![3.0, 0.0]).unwrap(),
                },
            ],
        };
        let stats = CompressionStats::default();
        let bytes = encode_compressed(&tokens, &stats).unwrap();
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        let json_at = 16 + 2 * record_len(2);
        let len = u32::from_le_bytes(bytes[json_at..json_at + 4].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), json_at + 4 + len);
        let back = decode_compressed(&bytes).unwrap();
        assert_eq!(back.tokens, tokens);
        assert_eq!(back.stats, stats);
    }

    #[test]
    fn compressed_rejects_bad_level() {
        let tokens = CompressedTokenSequence {
            tokens: vec![CompressedToken {
                frame_original_index: 0,
                timestep: 0.0,
                grid_h: 0,
                grid_w: 0,
                level: ResolutionLevel::Full,
                vector: FeatureVector::new(vec![1.0]).unwrap(),
            }],
        };
        let mut bytes = encode_compressed(&tokens, &CompressionStats::default()).unwrap();
        bytes[16 + 12] = 7;
        assert!(matches!(decode_compressed(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
