//! Little-endian binary containers.
//!
//! `EMB1` holds one labeled embedding matrix:
//!
//! ```text
//! 0..4    magic "EMB1"
//! 4..8    u32 version = 1
//! 8..12   u32 n (rows)
//! 12..16  u32 p (columns)
//! 16      u8 dtype (1 = float32)
//! 17      u8 flags (1 = provenance tags present)
//! 18..20  zero
//! 20..    n·p f32 row-major, n u32 labels, [n u8 provenance tags]
//! ```
//!
//! `GEO1` stores class statistics or shapes in float64, `MLP1` stores
//! classifier parameters in float64. Both follow the same conventions.

use ndarray::{Array1, Array2};

use crate::error::ContainerError;
use crate::geometry::{ClassStats, GeometricShape};
use crate::model::LinearClassifierParams;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const GEO_MAGIC: &[u8; 4] = b"GEO1";
pub const MLP_MAGIC: &[u8; 4] = b"MLP1";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;
pub const EMB_HEADER_LEN: usize = 20;

const FLAG_PROVENANCE: u8 = 1;
const GEO_KIND_STATS: u32 = 1;
const GEO_KIND_SHAPES: u32 = 2;

/// Decoded contents of an `EMB1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddings {
    pub rows: Array2<f32>,
    pub labels: Vec<u32>,
    pub provenance: Option<Vec<u8>>,
}

impl LabeledEmbeddings {
    pub fn empty(dim: usize) -> Self {
        Self {
            rows: Array2::zeros((0, dim)),
            labels: Vec::new(),
            provenance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Rows widened to f64.
    pub fn rows_f64(&self) -> Array2<f64> {
        self.rows.mapv(f64::from)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8], ContainerError> {
        let available = self.buf.len() - self.pos;
        if len > available {
            return Err(ContainerError::Truncated {
                offset: self.pos,
                needed: len,
                available,
            });
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), ContainerError> {
        let found = self.take(4).map_err(|_| ContainerError::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(self.buf).into_owned(),
        })?;
        if found != expected {
            return Err(ContainerError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn version(&mut self) -> Result<(), ContainerError> {
        let offset = self.pos;
        let version = self.u32()?;
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion { version, offset });
        }
        Ok(())
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>, ContainerError> {
        let bytes = self.take(count * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>, ContainerError> {
        let bytes = self.take(count * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u32s(&mut self, count: usize) -> Result<Vec<u32>, ContainerError> {
        let bytes = self.take(count * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(self) -> Result<(), ContainerError> {
        let rest = self.buf.len() - self.pos;
        if rest != 0 {
            return Err(ContainerError::TrailingBytes {
                offset: self.pos,
                count: rest,
            });
        }
        Ok(())
    }
}

/// `a * b * elem` as a byte count, or an overflow error reported at `offset`.
fn checked_len(a: usize, b: usize, elem: usize, offset: usize) -> Result<usize, ContainerError> {
    a.checked_mul(b)
        .and_then(|x| x.checked_mul(elem))
        .filter(|&x| x <= isize::MAX as usize)
        .ok_or_else(|| ContainerError::DimensionOverflow {
            offset,
            detail: format!("{a} × {b} elements of {elem} bytes"),
        })
}

fn to_u32(value: usize, what: &str) -> Result<u32, ContainerError> {
    u32::try_from(value).map_err(|_| ContainerError::DimensionOverflow {
        offset: 0,
        detail: format!("{what} = {value} does not fit in u32"),
    })
}

pub fn encode_embeddings(data: &LabeledEmbeddings) -> Result<Vec<u8>, ContainerError> {
    let (n, p) = data.rows.dim();
    if data.labels.len() != n {
        return Err(ContainerError::Malformed {
            offset: 0,
            detail: format!("{} labels for {n} rows", data.labels.len()),
        });
    }
    if let Some(tags) = &data.provenance {
        if tags.len() != n {
            return Err(ContainerError::Malformed {
                offset: 0,
                detail: format!("{} provenance tags for {n} rows", tags.len()),
            });
        }
    }
    let body = checked_len(n, p, 4, 0)?;
    let mut out = Vec::with_capacity(EMB_HEADER_LEN + body + n * 5);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(n, "n")?.to_le_bytes());
    out.extend_from_slice(&to_u32(p, "p")?.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(if data.provenance.is_some() { FLAG_PROVENANCE } else { 0 });
    out.extend_from_slice(&[0, 0]);
    for x in data.rows.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for l in &data.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    if let Some(tags) = &data.provenance {
        out.extend_from_slice(tags);
    }
    Ok(out)
}

pub fn decode_embeddings(buf: &[u8]) -> Result<LabeledEmbeddings, ContainerError> {
    let mut r = Reader::new(buf);
    r.magic(EMB_MAGIC)?;
    r.version()?;
    let n = r.u32()? as usize;
    let p_offset = r.pos;
    let p = r.u32()? as usize;
    if p == 0 {
        return Err(ContainerError::Malformed {
            offset: p_offset,
            detail: "embedding width must be at least 1".into(),
        });
    }
    let dtype_offset = r.pos;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(ContainerError::UnsupportedDtype {
            dtype,
            offset: dtype_offset,
        });
    }
    let flag_offset = r.pos;
    let flags = r.u8()?;
    if flags & !FLAG_PROVENANCE != 0 {
        return Err(ContainerError::Malformed {
            offset: flag_offset,
            detail: format!("unknown flags {flags:#04x}"),
        });
    }
    let pad_offset = r.pos;
    if r.take(2)? != [0, 0] {
        return Err(ContainerError::Malformed {
            offset: pad_offset,
            detail: "reserved header bytes must be zero".into(),
        });
    }
    let data_len = checked_len(n, p, 4, 8)?;
    let values = r.f32s(data_len / 4)?;
    let labels = r.u32s(n)?;
    let provenance = if flags & FLAG_PROVENANCE != 0 {
        Some(r.take(n)?.to_vec())
    } else {
        None
    };
    r.finish()?;
    let rows = Array2::from_shape_vec((n, p), values).expect("length checked above");
    Ok(LabeledEmbeddings {
        rows,
        labels,
        provenance,
    })
}

fn geo_header(out: &mut Vec<u8>, kind: u32, p: usize, entries: usize) -> Result<(), ContainerError> {
    out.extend_from_slice(GEO_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&to_u32(p, "p")?.to_le_bytes());
    out.extend_from_slice(&to_u32(entries, "entries")?.to_le_bytes());
    Ok(())
}

fn push_f64s<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for x in values {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct GeoEntry {
    class_id: u32,
    count: u64,
    vector: Array1<f64>,
    matrix: Array2<f64>,
}

fn decode_geo(buf: &[u8], expected_kind: u32) -> Result<Vec<GeoEntry>, ContainerError> {
    let mut r = Reader::new(buf);
    r.magic(GEO_MAGIC)?;
    r.version()?;
    let kind_offset = r.pos;
    let kind = r.u32()?;
    if kind != expected_kind {
        return Err(ContainerError::Malformed {
            offset: kind_offset,
            detail: format!("expected record kind {expected_kind}, found {kind}"),
        });
    }
    let p_offset = r.pos;
    let p = r.u32()? as usize;
    if p == 0 {
        return Err(ContainerError::Malformed {
            offset: p_offset,
            detail: "dimension must be at least 1".into(),
        });
    }
    let entries = r.u32()? as usize;
    let matrix_len = checked_len(p, p, 8, p_offset)? / 8;
    let mut out = Vec::new();
    for _ in 0..entries {
        let class_id = r.u32()?;
        let count = r.u64()?;
        let vector = Array1::from(r.f64s(p)?);
        let matrix = Array2::from_shape_vec((p, p), r.f64s(matrix_len)?).expect("sized read");
        out.push(GeoEntry {
            class_id,
            count,
            vector,
            matrix,
        });
    }
    r.finish()?;
    Ok(out)
}

fn common_dim(dims: impl Iterator<Item = usize>) -> Result<usize, ContainerError> {
    let mut p = None;
    for d in dims {
        match p {
            None => p = Some(d),
            Some(q) if q != d => {
                return Err(ContainerError::Malformed {
                    offset: 0,
                    detail: format!("mixed dimensions {q} and {d}"),
                })
            }
            _ => {}
        }
    }
    p.ok_or_else(|| ContainerError::Malformed {
        offset: 0,
        detail: "nothing to encode".into(),
    })
}

pub fn encode_class_stats(stats: &[ClassStats]) -> Result<Vec<u8>, ContainerError> {
    let p = common_dim(stats.iter().map(ClassStats::dim))?;
    let mut out = Vec::new();
    geo_header(&mut out, GEO_KIND_STATS, p, stats.len())?;
    for s in stats {
        out.extend_from_slice(&s.class_id.to_le_bytes());
        out.extend_from_slice(&(s.count as u64).to_le_bytes());
        push_f64s(&mut out, s.mean.iter());
        push_f64s(&mut out, s.covariance.iter());
    }
    Ok(out)
}

pub fn decode_class_stats(buf: &[u8]) -> Result<Vec<ClassStats>, ContainerError> {
    decode_geo(buf, GEO_KIND_STATS)?
        .into_iter()
        .map(|e| {
            Ok(ClassStats {
                class_id: e.class_id,
                count: usize::try_from(e.count).map_err(|_| ContainerError::DimensionOverflow {
                    offset: 0,
                    detail: format!("count {} too large", e.count),
                })?,
                mean: e.vector,
                covariance: e.matrix,
            })
        })
        .collect()
}

pub fn encode_shapes(shapes: &[GeometricShape]) -> Result<Vec<u8>, ContainerError> {
    let p = common_dim(shapes.iter().map(GeometricShape::dim))?;
    let mut out = Vec::new();
    geo_header(&mut out, GEO_KIND_SHAPES, p, shapes.len())?;
    for s in shapes {
        out.extend_from_slice(&s.class_id.to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes());
        push_f64s(&mut out, s.eigenvalues.iter());
        push_f64s(&mut out, s.eigenvectors.iter());
    }
    Ok(out)
}

pub fn decode_shapes(buf: &[u8]) -> Result<Vec<GeometricShape>, ContainerError> {
    Ok(decode_geo(buf, GEO_KIND_SHAPES)?
        .into_iter()
        .map(|e| GeometricShape {
            class_id: e.class_id,
            eigenvalues: e.vector,
            eigenvectors: e.matrix,
        })
        .collect())
}

pub fn encode_params(params: &LinearClassifierParams) -> Result<Vec<u8>, ContainerError> {
    let (c, p) = params.weights.dim();
    let mut out = Vec::with_capacity(20 + 8 * c * (p + 1));
    out.extend_from_slice(MLP_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(c, "classes")?.to_le_bytes());
    out.extend_from_slice(&to_u32(p, "p")?.to_le_bytes());
    out.push(DTYPE_F64);
    out.extend_from_slice(&[0, 0, 0]);
    push_f64s(&mut out, params.weights.iter());
    push_f64s(&mut out, params.bias.iter());
    Ok(out)
}

pub fn decode_params(buf: &[u8]) -> Result<LinearClassifierParams, ContainerError> {
    let mut r = Reader::new(buf);
    r.magic(MLP_MAGIC)?;
    r.version()?;
    let c = r.u32()? as usize;
    let p = r.u32()? as usize;
    let dtype_offset = r.pos;
    let dtype = r.u8()?;
    if dtype != DTYPE_F64 {
        return Err(ContainerError::UnsupportedDtype {
            dtype,
            offset: dtype_offset,
        });
    }
    let pad_offset = r.pos;
    if r.take(3)? != [0, 0, 0] {
        return Err(ContainerError::Malformed {
            offset: pad_offset,
            detail: "reserved header bytes must be zero".into(),
        });
    }
    let w_len = checked_len(c, p, 8, 8)? / 8;
    let weights = Array2::from_shape_vec((c, p), r.f64s(w_len)?).expect("sized read");
    let bias = Array1::from(r.f64s(c)?);
    r.finish()?;
    Ok(LinearClassifierParams { weights, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn sample() -> LabeledEmbeddings {
        LabeledEmbeddings {
            rows: array![[1.0f32, -2.5, 3.25], [0.0, 1e-7, -0.0]],
            labels: vec![3, 0],
            provenance: None,
        }
    }

    #[test]
    fn header_layout_is_exact() {
        let mut d = sample();
        d.provenance = Some(vec![0, 2]);
        let bytes = encode_embeddings(&d).unwrap();
        assert_eq!(&bytes[0..4], b"EMB1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[1, 1, 0, 0]);
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 6 * 4 + 2 * 4 + 2);
        assert_eq!(&bytes[44..48], &3u32.to_le_bytes());
        assert_eq!(&bytes[52..], &[0, 2]);
    }

    #[test]
    fn empty_split_round_trips() {
        let d = LabeledEmbeddings::empty(7);
        let bytes = encode_embeddings(&d).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(decode_embeddings(&bytes).unwrap(), d);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_embeddings(&sample()).unwrap();
        for cut in [0usize, 3, 10, 19, 21, bytes.len() - 1] {
            let err = decode_embeddings(&bytes[..cut]).unwrap_err();
            if cut < 4 {
                assert!(matches!(err, ContainerError::BadMagic { .. }), "{cut}: {err:?}");
            } else {
                assert!(matches!(err, ContainerError::Truncated { .. }), "{cut}: {err:?}");
            }
        }
        match decode_embeddings(&bytes[..30]).unwrap_err() {
            ContainerError::Truncated { offset, needed, available } => {
                assert_eq!((offset, needed, available), (20, 24, 10));
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn distinct_header_errors() {
        let good = encode_embeddings(&sample()).unwrap();
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(decode_embeddings(&b), Err(ContainerError::BadMagic { .. })));
        let mut b = good.clone();
        b[4] = 2;
        assert_eq!(
            decode_embeddings(&b),
            Err(ContainerError::UnsupportedVersion { version: 2, offset: 4 })
        );
        let mut b = good.clone();
        b[16] = 2;
        assert_eq!(
            decode_embeddings(&b),
            Err(ContainerError::UnsupportedDtype { dtype: 2, offset: 16 })
        );
        let mut b = good.clone();
        b[19] = 1;
        assert!(matches!(decode_embeddings(&b), Err(ContainerError::Malformed { offset: 18, .. })));
        let mut b = good.clone();
        b.push(0);
        assert!(matches!(decode_embeddings(&b), Err(ContainerError::TrailingBytes { count: 1, .. })));
        let mut b = good;
        b[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        b[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        let err = decode_embeddings(&b).unwrap_err();
        assert!(
            matches!(err, ContainerError::DimensionOverflow { .. } | ContainerError::Truncated { .. }),
            "{err:?}"
        );
    }

    #[test]
    fn stats_and_shapes_round_trip() {
        let stats = vec![
            ClassStats {
                class_id: 4,
                count: 12,
                mean: array![0.1, -0.2],
                covariance: array![[1.0, 0.5], [0.5, 2.0]],
            },
            ClassStats::empty(5, 2),
        ];
        let bytes = encode_class_stats(&stats).unwrap();
        assert_eq!(decode_class_stats(&bytes).unwrap(), stats);
        assert!(decode_shapes(&bytes).is_err());

        let shapes = vec![GeometricShape {
            class_id: 1,
            eigenvalues: array![2.0, 1.0],
            eigenvectors: array![[0.6, -0.8], [0.8, 0.6]],
        }];
        let bytes = encode_shapes(&shapes).unwrap();
        assert_eq!(decode_shapes(&bytes).unwrap(), shapes);
        assert!(decode_shapes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn params_round_trip() {
        let params = LinearClassifierParams {
            weights: array![[1.0, 2.0, 3.0], [-1.0, 0.5, f64::MIN_POSITIVE]],
            bias: array![0.25, -0.75],
        };
        let bytes = encode_params(&params).unwrap();
        assert_eq!(&bytes[..4], b"MLP1");
        assert_eq!(decode_params(&bytes).unwrap(), params);
        assert!(matches!(decode_params(&bytes[..25]), Err(ContainerError::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn embeddings_round_trip_bit_exact(
            n in 0usize..12,
            p in 1usize..6,
            tagged in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let mut next = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); state };
            let rows = Array2::from_shape_fn((n, p), |_| f32::from_bits((next() >> 32) as u32 & 0x7f7f_ffff));
            let labels: Vec<u32> = (0..n).map(|_| (next() >> 40) as u32).collect();
            let provenance = tagged.then(|| (0..n).map(|i| (i % 3) as u8).collect());
            let d = LabeledEmbeddings { rows, labels, provenance };
            let bytes = encode_embeddings(&d).unwrap();
            let back = decode_embeddings(&bytes).unwrap();
            prop_assert_eq!(&back.labels, &d.labels);
            prop_assert_eq!(&back.provenance, &d.provenance);
            let same_bits = back.rows.iter().zip(d.rows.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same_bits);
            prop_assert_eq!(encode_embeddings(&back).unwrap(), bytes);
        }
    }
}
