//! Binary tensor and weight-bundle formats, PPM export and CSV tables.
//!
//! `VETEN`: magic, version byte, dtype byte (1 = f32, 2 = f64), rank byte,
//! `rank` little-endian u64 dims, then little-endian row-major values.
//!
//! `VEWTS`: magic, version byte, little-endian u32 entry count, then per entry
//! a little-endian u16 name length, the UTF-8 name and a `VETEN` blob.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::alignment::AlignmentWeights;
use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::numcore::{Precision, Tensor};

pub const TENSOR_MAGIC: &[u8; 5] = b"VETEN";
pub const BUNDLE_MAGIC: &[u8; 5] = b"VEWTS";
pub const FORMAT_VERSION: u8 = 1;
pub const ALIGN_NAME: &str = "align.Wa";

fn dtype_byte(p: Precision) -> u8 {
    match p {
        Precision::F32 => 1,
        Precision::F64 => 2,
    }
}

/// Serializes `t` at `precision`. F32 storage rounds each value to nearest.
pub fn tensor_to_bytes(t: &Tensor, precision: Precision) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::invalid(format!("rank {} does not fit the header", t.rank())));
    }
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + width * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(dtype_byte(precision));
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], format: &'static str) -> Self {
        Self { buf, pos: 0, format }
    }

    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            format: self.format,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 5]) -> Result<()> {
        if self.take(5)? != magic {
            return Err(self.err("bad magic"));
        }
        let v = self.u8()?;
        if v != FORMAT_VERSION {
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<(Tensor, Precision)> {
        self.header(TENSOR_MAGIC)?;
        let precision = match self.u8()? {
            1 => Precision::F32,
            2 => Precision::F64,
            other => return Err(self.err(format!("unknown dtype {other}"))),
        };
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = usize::try_from(self.u64()?).map_err(|_| self.err("dimension overflows usize"))?;
            shape.push(d);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.err("element count overflows"))?;
        let width = if precision == Precision::F32 { 4 } else { 8 };
        let raw = self.take(count.checked_mul(width).ok_or_else(|| self.err("size overflows"))?)?;
        let data = match precision {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Precision::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| self.err(e.to_string()))?;
        Ok((t, precision))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<(Tensor, Precision)> {
    let mut r = Reader::new(bytes, "VETEN");
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

/// Named tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub entries: Vec<(String, Tensor)>,
    pub precision: Precision,
}

impl Bundle {
    pub fn new(weights: &EncoderWeights, alignment: Option<&AlignmentWeights>, precision: Precision) -> Self {
        let mut entries: Vec<(String, Tensor)> = weights
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.with_precision(precision)))
            .collect();
        if let Some(a) = alignment {
            entries.push((ALIGN_NAME.to_string(), a.wa().with_precision(precision)));
        }
        Self { entries, precision }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<Tensor> {
        self.get(name).cloned().ok_or_else(|| Error::Format {
            format: "VEWTS",
            detail: format!("missing entry {name}"),
        })
    }

    pub fn encoder_weights(&self) -> Result<EncoderWeights> {
        let layers = (0..).take_while(|i| self.get(&format!("layer{i}.Wq")).is_some()).count();
        let mut ordered = vec![
            self.require("patch_embed")?,
            self.require("cls_seed")?,
            self.require("pos_embed")?,
        ];
        for i in 0..layers {
            for m in ["Wq", "Wk", "Wv"] {
                ordered.push(self.require(&format!("layer{i}.{m}"))?);
            }
        }
        EncoderWeights::from_ordered(ordered)
    }

    pub fn alignment(&self) -> Result<Option<AlignmentWeights>> {
        self.get(ALIGN_NAME).cloned().map(AlignmentWeights::new).transpose()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::invalid("too many bundle entries"))?;
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("entry name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend(tensor_to_bytes(t, self.precision)?);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "VEWTS");
        r.header(BUNDLE_MAGIC)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        let mut precision = None;
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err("entry name is not UTF-8"))?
                .to_string();
            let mut inner = Reader::new(&r.buf[r.pos..], "VETEN");
            let (t, p) = inner.tensor()?;
            r.pos += inner.pos;
            if *precision.get_or_insert(p) != p {
                return Err(r.err("entries mix storage precisions"));
            }
            entries.push((name, t));
        }
        r.finish()?;
        Ok(Self {
            entries,
            precision: precision.unwrap_or(Precision::F64),
        })
    }
}

/// Hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of the f64 bundle of `weights` and optional alignment.
pub fn fingerprint(weights: &EncoderWeights, alignment: Option<&AlignmentWeights>) -> Result<String> {
    Ok(content_hash(&Bundle::new(weights, alignment, Precision::F64).to_bytes()?))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor, precision: Precision) -> Result<()> {
    write_bytes(path, &tensor_to_bytes(t, precision)?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Ok(tensor_from_bytes(&read_bytes(path)?)?.0)
}

pub fn write_bundle(path: &Path, bundle: &Bundle) -> Result<()> {
    write_bytes(path, &bundle.to_bytes()?)
}

pub fn read_bundle(path: &Path) -> Result<Bundle> {
    Bundle::from_bytes(&read_bytes(path)?)
}

/// Binary PPM (P6) of an `H x W x C` image in `[0, 1]`, 8-bit, rounded to
/// nearest. Single-channel images are written as grey.
pub fn ppm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w, c] = image.shape() else {
        return Err(Error::invalid(format!("PPM needs an H x W x C image, got {:?}", image.shape())));
    };
    let (h, w, c) = (*h, *w, *c);
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("PPM needs 1 or 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for px in image.data().chunks_exact(c) {
        if c == 1 {
            out.extend([q(px[0]); 3]);
        } else {
            out.extend(px.iter().map(|&v| q(v)));
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write_bytes(path, &ppm_bytes(image)?)
}

/// Writes a header row and data rows. Floats use the shortest representation
/// that parses back to the same value.
pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header.iter().map(|s| s.as_ref()))?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Columns `step, loss, token0 … token{n_v-1}`.
pub fn trace_rows(trace: &crate::attack::AttackTrace) -> (Vec<String>, Vec<Vec<String>>) {
    let n_v = trace.deviations.first().map(Vec::len).unwrap_or(0);
    let mut header = vec!["step".to_string(), "loss".to_string()];
    header.extend((0..n_v).map(|j| format!("token{j}")));
    let rows = trace
        .losses
        .iter()
        .zip(&trace.deviations)
        .enumerate()
        .map(|(s, (l, d))| {
            let mut r = vec![(s + 1).to_string(), l.to_string()];
            r.extend(d.iter().map(f64::to_string));
            r
        })
        .collect();
    (header, rows)
}

/// Rows of a `rows x cols` matrix with a header `col0 …` or the given names.
pub fn matrix_rows(m: &Tensor) -> Result<Vec<Vec<String>>> {
    let (r, _) = m.dims2()?;
    Ok((0..r).map(|i| m.row(i).iter().map(f64::to_string).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_weights, EncoderConfig};

    #[test]
    fn tensor_roundtrip_is_byte_identical() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin() * 1e3);
        for p in [Precision::F64, Precision::F32] {
            let b = tensor_to_bytes(&t, p).unwrap();
            let (back, bp) = tensor_from_bytes(&b).unwrap();
            assert_eq!(bp, p);
            assert_eq!(tensor_to_bytes(&back, p).unwrap(), b);
            if p == Precision::F64 {
                assert_eq!(back, t);
            } else {
                assert_eq!(back, t.with_precision(Precision::F32));
            }
        }
    }

    #[test]
    fn header_layout() {
        let b = tensor_to_bytes(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(), Precision::F64).unwrap();
        assert_eq!(&b[..5], b"VETEN");
        assert_eq!(&b[5..8], &[1, 2, 2]);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(b[24..32].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 40);
    }

    #[test]
    fn malformed_inputs_rejected() {
        let good = tensor_to_bytes(&Tensor::ones(&[3]), Precision::F64).unwrap();
        assert!(tensor_from_bytes(&good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(tensor_from_bytes(&extra).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(tensor_from_bytes(&bad).is_err());
        bad = good.clone();
        bad[6] = 9;
        assert!(tensor_from_bytes(&bad).is_err());
    }

    #[test]
    fn bundle_roundtrip() {
        let enc = EncoderConfig {
            layers: 2,
            ..Default::default()
        };
        let w = init_weights(&enc, 3, 1.0).unwrap();
        let a = AlignmentWeights::init(64, 96, 3).unwrap();
        let b = Bundle::new(&w, Some(&a), Precision::F64);
        let bytes = b.to_bytes().unwrap();
        let back = Bundle::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.encoder_weights().unwrap(), w);
        assert_eq!(back.alignment().unwrap().unwrap().wa(), a.wa());
        assert_eq!(back.entries.iter().map(|e| e.0.as_str()).next_back(), Some(ALIGN_NAME));
        assert_eq!(fingerprint(&w, Some(&a)).unwrap(), content_hash(&bytes));
    }

    #[test]
    fn bundle_missing_entry() {
        let b = Bundle {
            entries: vec![("patch_embed".into(), Tensor::ones(&[2, 2]))],
            precision: Precision::F64,
        };
        assert!(b.encoder_weights().is_err());
        assert!(b.alignment().unwrap().is_none());
    }

    #[test]
    fn ppm_rounds_to_nearest() {
        let img = Tensor::new(vec![1, 2, 3], vec![0.0, 1.0, 0.5, 0.2, 0.998, 1.0 / 255.0]).unwrap();
        let b = ppm_bytes(&img).unwrap();
        let head = b"P6\n2 1\n255\n";
        assert_eq!(&b[..head.len()], head);
        assert_eq!(&b[head.len()..], &[0, 255, 128, 51, 254, 1]);
    }

    #[test]
    fn csv_floats_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let v: f64 = 0.1 + 0.2;
        write_csv(&p, &["a"], &[vec![v.to_string()]]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let parsed: f64 = text.lines().nth(1).unwrap().parse().unwrap();
        assert_eq!(parsed.to_bits(), v.to_bits());
    }
}
