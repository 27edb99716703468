//! Dense float tensors and their on-disk format.
//!
//! Files use the NumPy `.npy` layout: the magic string `\x93NUMPY`, a version
//! pair, a little-endian header length, and an ASCII dict header describing
//! `descr`, `fortran_order` and `shape`, padded with spaces to a multiple of
//! 64 bytes and terminated by `\n`. Only little-endian `float32` in C order is
//! accepted. Version 1.0 is written; 2.0 and 3.0 headers are also readable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

/// A C-ordered `float32` array of arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Format(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }
}

/// Channel-major feature tensor (`channels x height x width`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    /// Validates shape and finiteness.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Data(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Data(format!(
                "{channels}x{height}x{width} feature map needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Feature vector at spatial position `(y, x)`, gathered across channels.
    pub fn vector_at(&self, y: usize, x: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.channels);
        self.vector_into(y, x, &mut out);
        out
    }

    pub(crate) fn vector_into(&self, y: usize, x: usize, out: &mut Vec<f32>) {
        let plane = self.height * self.width;
        let offset = y * self.width + x;
        out.extend((0..self.channels).map(|c| self.data[c * plane + offset]));
    }

    /// All spatial positions as rows of a `(height*width) x channels` matrix,
    /// row-major over positions.
    pub fn to_rows(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut rows = vec![0.0; plane * self.channels];
        for c in 0..self.channels {
            for (p, &v) in self.channel(c).iter().enumerate() {
                rows[p * self.channels + c] = v;
            }
        }
        rows
    }
}

impl TryFrom<Array> for FeatureMap {
    type Error = Error;

    fn try_from(array: Array) -> Result<Self> {
        match array.shape[..] {
            [c, h, w] => FeatureMap::new(c, h, w, array.data),
            _ => Err(Error::Format(format!(
                "expected a rank-3 (C,H,W) tensor, found shape {:?}",
                array.shape
            ))),
        }
    }
}

impl From<FeatureMap> for Array {
    fn from(map: FeatureMap) -> Self {
        Array {
            shape: vec![map.channels, map.height, map.width],
            data: map.data,
        }
    }
}

/// Serializes the header and payload of an array.
pub fn encode(shape: &[usize], data: &[f32]) -> Vec<u8> {
    let shape_text = match shape {
        [single] => format!("({single},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header =
        format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_text}, }}");
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.extend(std::iter::repeat(' ').take(padding));
    header.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses an in-memory tensor file.
pub fn decode(bytes: &[u8]) -> Result<Array> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(Error::Format("truncated header length".into()));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        _ => {
            return Err(Error::Format(format!(
                "unsupported format version {major}.{minor}"
            )))
        }
    };
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Format("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[header_start..payload_start])
        .map_err(|_| Error::Format("header is not valid text".into()))?;
    let header = parse_header(header)?;
    if header.descr != "<f4" {
        return Err(Error::Format(format!(
            "dtype {} is not little-endian float32",
            header.descr
        )));
    }
    if header.fortran_order {
        return Err(Error::Format("Fortran-ordered arrays are not supported".into()));
    }

    let count: usize = header.shape.iter().product();
    let payload = &bytes[payload_start..];
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "shape {:?} needs {} payload bytes, found {}",
            header.shape,
            count * 4,
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| v.is_nan()) {
        return Err(Error::Data(format!("NaN in payload at flat index {i}")));
    }
    Array::new(header.shape, data)
}

pub fn read_array(path: impl AsRef<Path>) -> Result<Array> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_array(path: impl AsRef<Path>, shape: &[usize], data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(shape, data);
    File::create(path)
        .and_then(|f| {
            let mut w = BufWriter::new(f);
            w.write_all(&bytes)?;
            w.flush()
        })
        .map_err(|e| Error::io(path, e))
}

/// Reads a `(C,H,W)` feature map.
pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    FeatureMap::try_from(read_array(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_tensor_file(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    write_array(path, &[map.channels, map.height, map.width], &map.data)
}

struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

fn parse_header(text: &str) -> Result<Header> {
    let bad = |what: &str| Error::Format(format!("header {what}: {:?}", text.trim_end()));
    let body = text
        .trim()
        .strip_prefix('{')
        .and_then(|t| t.strip_suffix('}'))
        .ok_or_else(|| bad("is not a dict"))?;

    let mut descr = None;
    let mut fortran_order = None;
    let mut shape = None;
    let mut rest = body.trim_start();
    while !rest.is_empty() {
        let (key, after) = quoted(rest).ok_or_else(|| bad("has a malformed key"))?;
        let after = after
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| bad("is missing ':'"))?
            .trim_start();
        let after = match key {
            "descr" => {
                let (value, after) = quoted(after).ok_or_else(|| bad("has a malformed descr"))?;
                descr = Some(value.to_string());
                after
            }
            "fortran_order" => {
                if let Some(a) = after.strip_prefix("False") {
                    fortran_order = Some(false);
                    a
                } else if let Some(a) = after.strip_prefix("True") {
                    fortran_order = Some(true);
                    a
                } else {
                    return Err(bad("has a malformed fortran_order"));
                }
            }
            "shape" => {
                let inner = after
                    .strip_prefix('(')
                    .ok_or_else(|| bad("has a malformed shape"))?;
                let close = inner.find(')').ok_or_else(|| bad("has a malformed shape"))?;
                let dims = inner[..close]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim_end_matches('L').parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad("has a non-integer dimension"))?;
                shape = Some(dims);
                &inner[close + 1..]
            }
            _ => return Err(bad("has an unknown key")),
        };
        rest = after.trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }

    Ok(Header {
        descr: descr.ok_or_else(|| bad("lacks descr"))?,
        fortran_order: fortran_order.ok_or_else(|| bad("lacks fortran_order"))?,
        shape: shape.ok_or_else(|| bad("lacks shape"))?,
    })
}

/// Splits a leading single- or double-quoted string off `s`.
fn quoted(s: &str) -> Option<(&str, &str)> {
    let quote = s.chars().next().filter(|c| *c == '\'' || *c == '"')?;
    let end = s[1..].find(quote)? + 1;
    Some((&s[1..end], &s[end + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_value_layout_is_fixed() {
        let map = FeatureMap::new(1, 1, 1, vec![2.0]).unwrap();
        let bytes = encode(&[1, 1, 1], map.data());

        // Built by hand: magic, version 1.0, header length, dict padded so the
        // payload starts on a 64-byte boundary, then 2.0f32 little-endian.
        let dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (1, 1, 1), }";
        let header_len = 128 - 10;
        let mut expected = vec![0x93, b'N', b'U', b'M', b'P', b'Y', 1, 0];
        expected.extend_from_slice(&(header_len as u16).to_le_bytes());
        expected.extend_from_slice(dict.as_bytes());
        expected.extend(std::iter::repeat(b' ').take(header_len - dict.len() - 1));
        expected.push(b'\n');
        expected.extend_from_slice(&[0x00, 0x00, 0x00, 0x40]);
        assert_eq!(bytes, expected);

        let back = FeatureMap::try_from(decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn rejects_float64() {
        let mut bytes = encode(&[1, 1, 1], &[2.0]);
        let pos = bytes.windows(3).position(|w| w == b"<f4").unwrap();
        bytes[pos + 2] = b'8';
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode(&[1], &[1.0]);
        bytes[1] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_short_payload() {
        let mut bytes = encode(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_nan_payload() {
        let bytes = encode(&[1, 1, 2], &[1.0, f32::NAN]);
        assert!(matches!(decode(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn rank_two_is_not_a_feature_map() {
        let array = decode(&encode(&[2, 2], &[0.0; 4])).unwrap();
        assert!(matches!(FeatureMap::try_from(array), Err(Error::Format(_))));
    }

    #[test]
    fn reads_numpy_style_variants() {
        // Header as written by older numpy releases: 16-byte alignment, Python 2 longs.
        let dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (2L,), }";
        let mut header = dict.to_string();
        while (10 + header.len() + 1) % 16 != 0 {
            header.push(' ');
        }
        header.push('\n');
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-3.0f32).to_le_bytes());
        let array = decode(&bytes).unwrap();
        assert_eq!(array.shape, vec![2]);
        assert_eq!(array.data, vec![1.5, -3.0]);
    }

    #[test]
    fn feature_map_rejects_infinity() {
        assert!(matches!(
            FeatureMap::new(1, 1, 2, vec![0.0, f32::INFINITY]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn rows_follow_position_order() {
        let map = FeatureMap::new(2, 1, 2, vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        assert_eq!(map.to_rows(), vec![1.0, 10.0, 2.0, 20.0]);
        assert_eq!(map.vector_at(0, 1), vec![2.0, 20.0]);
    }

    proptest! {
        #[test]
        fn file_round_trip(
            (c, h, w, data) in (1usize..5, 1usize..6, 1usize..7).prop_flat_map(|(c, h, w)| {
                (Just(c), Just(h), Just(w),
                 proptest::collection::vec(-1e6f32..1e6, c * h * w))
            })
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.npy");
            let map = FeatureMap::new(c, h, w, data).unwrap();
            write_tensor_file(&path, &map).unwrap();
            let back = read_tensor_file(&path).unwrap();
            prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            map.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!((back.channels(), back.height(), back.width()), (c, h, w));
            let bytes = std::fs::read(&path).unwrap();
            prop_assert_eq!(bytes, encode(&[c, h, w], map.data()));
        }
    }
}
