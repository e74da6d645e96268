//! The `CDEC1` container: one framing for sample sets, query banks and
//! checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic     "CDEC1\0"            6 bytes
//! version   u16 = 1
//! section   u8  (1 samples, 2 query bank, 3 checkpoint)
//! header    u32 length + UTF-8 JSON
//! payload   section-specific raw values
//! crc       u32 CRC32 of every byte between the magic and the crc
//! ```
//!
//! Sample payloads hold, per record, a `u32` label count, that many `u32`
//! label indices, then `N x d_in` `f32` token values. Query-bank payloads are
//! `C x d_text` `f32` values. The JSON header always carries `payload_bytes`
//! so a short file is distinguishable from a corrupted one.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{read_bytes, write_atomic, Provenance, QueryBankSource, SampleRecord, SampleSet};
use crate::error::{FormatError, Result};
use crate::io::synth::SynthConfig;
use crate::io::vocab::{ClassEntry, ClassVocabulary};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 6] = b"CDEC1\0";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Section {
    Samples = 1,
    QueryBank = 2,
    Checkpoint = 3,
}

const PRELUDE: usize = 6 + 2 + 1 + 4;
const MIN_LEN: usize = PRELUDE + 4;

#[derive(Serialize, Deserialize)]
struct FrameHeader<H> {
    payload_bytes: u64,
    #[serde(flatten)]
    body: H,
}

#[derive(Deserialize)]
struct PayloadSize {
    payload_bytes: u64,
}

pub(crate) fn encode_frame<H: Serialize>(section: Section, header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&FrameHeader {
        payload_bytes: payload.len() as u64,
        body: header,
    })
    .map_err(FormatError::from)?;
    let mut out = Vec::with_capacity(MIN_LEN + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(section as u8);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out[MAGIC.len()..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Validates framing and checksum, then hands header and payload to `parse`.
pub(crate) fn decode_frame<H, R>(
    bytes: &[u8],
    section: Section,
    parse: impl FnOnce(&H, &mut PayloadReader<'_>) -> Result<R, FormatError>,
) -> Result<(H, R), FormatError>
where
    H: DeserializeOwned,
{
    if bytes.len() < MAGIC.len() {
        return if MAGIC.starts_with(bytes) {
            Err(FormatError::Truncated("file shorter than magic".into()))
        } else {
            Err(FormatError::BadMagic)
        };
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < MIN_LEN {
        return Err(FormatError::Truncated(format!("{} bytes is below the minimum frame", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[6], bytes[7]]);
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let crc_at = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[crc_at..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[MAGIC.len()..crc_at]);
    let header_len = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let split = PRELUDE.checked_add(header_len).filter(|&end| end <= crc_at);

    if stored != computed {
        // A file cut short still parses up to its header; compare lengths.
        if let Some(end) = split {
            if let Ok(h) = serde_json::from_slice::<PayloadSize>(&bytes[PRELUDE..end]) {
                if ((crc_at - end) as u64) < h.payload_bytes {
                    return Err(FormatError::Truncated(format!(
                        "payload has {} of {} bytes",
                        crc_at - end,
                        h.payload_bytes
                    )));
                }
            }
        } else {
            return Err(FormatError::Truncated("header runs past end of file".into()));
        }
        return Err(FormatError::Checksum { stored, computed });
    }

    if bytes[8] != section as u8 {
        return Err(FormatError::WrongSection {
            expected: section as u8,
            found: bytes[8],
        });
    }
    let end = split.ok_or_else(|| FormatError::Inconsistent("header length exceeds file".into()))?;
    let header: FrameHeader<H> = serde_json::from_slice(&bytes[PRELUDE..end])?;
    let payload = &bytes[end..crc_at];
    if payload.len() as u64 != header.payload_bytes {
        return Err(FormatError::Inconsistent(format!(
            "header declares {} payload bytes, found {}",
            header.payload_bytes,
            payload.len()
        )));
    }
    let mut reader = PayloadReader { buf: payload, pos: 0 };
    let parsed = parse(&header.body, &mut reader)?;
    reader.finish()?;
    Ok((header.body, parsed))
}

pub(crate) struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FormatError::Inconsistent("payload shorter than the header describes".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| FormatError::Inconsistent("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| FormatError::Inconsistent("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Inconsistent(format!(
                "{} trailing payload bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn push_f32s<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    for v in values {
        out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
}

fn to_matrix<T: Scalar>(rows: usize, cols: usize, values: Vec<f32>) -> Matrix<T> {
    Matrix::new(rows, cols, values.into_iter().map(|v| T::of(v as f64)).collect())
        .expect("reader returned rows * cols values")
}

fn vocab_from(entries: &[ClassEntry]) -> Result<ClassVocabulary, FormatError> {
    ClassVocabulary::try_from(entries.to_vec()).map_err(|e| FormatError::Inconsistent(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct SamplesHeader {
    vocabulary: Vec<ClassEntry>,
    tokens_per_image: usize,
    token_dim: usize,
    record_count: usize,
    synth: Option<SynthConfig>,
}

pub fn encode_samples<T: Scalar>(set: &SampleSet<T>) -> Result<Vec<u8>> {
    set.validate()?;
    let (n, d) = set.token_shape().unwrap_or((0, 0));
    let mut payload = Vec::new();
    for r in &set.records {
        payload.extend_from_slice(&(r.labels.len() as u32).to_le_bytes());
        for &l in &r.labels {
            payload.extend_from_slice(&(l as u32).to_le_bytes());
        }
        push_f32s(&mut payload, r.tokens.as_slice());
    }
    let header = SamplesHeader {
        vocabulary: set.vocab.entries().to_vec(),
        tokens_per_image: n,
        token_dim: d,
        record_count: set.records.len(),
        synth: set.synth.clone(),
    };
    encode_frame(Section::Samples, &header, &payload)
}

pub fn decode_samples<T: Scalar>(bytes: &[u8]) -> Result<SampleSet<T>> {
    let (header, records) = decode_frame(bytes, Section::Samples, |h: &SamplesHeader, p| {
        let classes = h.vocabulary.len();
        if h.record_count > 0 && (h.tokens_per_image == 0 || h.token_dim == 0) {
            return Err(FormatError::Inconsistent("zero-sized token shape".into()));
        }
        let mut records = Vec::with_capacity(h.record_count.min(1 << 20));
        for i in 0..h.record_count {
            let count = p.u32()? as usize;
            let mut labels = Vec::with_capacity(count.min(classes));
            for _ in 0..count {
                let l = p.u32()? as usize;
                if l >= classes {
                    return Err(FormatError::Inconsistent(format!(
                        "record {i} label {l} out of range for {classes} classes"
                    )));
                }
                labels.push(l);
            }
            if labels.windows(2).any(|w| w[0] >= w[1]) {
                return Err(FormatError::Inconsistent(format!("record {i} labels not sorted and distinct")));
            }
            let values = p.f32s(h.tokens_per_image * h.token_dim)?;
            records.push(SampleRecord {
                tokens: to_matrix(h.tokens_per_image, h.token_dim, values),
                labels,
            });
        }
        Ok(records)
    })?;
    Ok(SampleSet {
        vocab: vocab_from(&header.vocabulary)?,
        records,
        synth: header.synth,
    })
}

#[derive(Serialize, Deserialize)]
struct QueryBankHeader {
    vocabulary: Vec<ClassEntry>,
    class_count: usize,
    text_dim: usize,
    provenance: Provenance,
    synth: Option<SynthConfig>,
}

pub fn encode_query_bank<T: Scalar>(bank: &QueryBankSource<T>) -> Result<Vec<u8>> {
    bank.validate()?;
    let mut payload = Vec::with_capacity(bank.embeddings.len() * 4);
    push_f32s(&mut payload, bank.embeddings.as_slice());
    let header = QueryBankHeader {
        vocabulary: bank.vocab.entries().to_vec(),
        class_count: bank.embeddings.rows(),
        text_dim: bank.embeddings.cols(),
        provenance: bank.provenance,
        synth: bank.synth.clone(),
    };
    encode_frame(Section::QueryBank, &header, &payload)
}

pub fn decode_query_bank<T: Scalar>(bytes: &[u8]) -> Result<QueryBankSource<T>> {
    let (header, embeddings) = decode_frame(bytes, Section::QueryBank, |h: &QueryBankHeader, p| {
        if h.class_count != h.vocabulary.len() {
            return Err(FormatError::Inconsistent(format!(
                "query bank has {} rows but the vocabulary has {} classes",
                h.class_count,
                h.vocabulary.len()
            )));
        }
        if h.text_dim == 0 {
            return Err(FormatError::Inconsistent("zero text dimension".into()));
        }
        let values = p.f32s(h.class_count * h.text_dim)?;
        Ok(to_matrix(h.class_count, h.text_dim, values))
    })?;
    Ok(QueryBankSource {
        vocab: vocab_from(&header.vocabulary)?,
        embeddings,
        provenance: header.provenance,
        synth: header.synth,
    })
}

pub fn write_samples<T: Scalar>(path: &Path, set: &SampleSet<T>) -> Result<()> {
    write_atomic(path, &encode_samples(set)?)
}

pub fn read_samples<T: Scalar>(path: &Path) -> Result<SampleSet<T>> {
    decode_samples(&read_bytes(path)?)
}

pub fn write_query_bank<T: Scalar>(path: &Path, bank: &QueryBankSource<T>) -> Result<()> {
    write_atomic(path, &encode_query_bank(bank)?)
}

pub fn read_query_bank<T: Scalar>(path: &Path) -> Result<QueryBankSource<T>> {
    decode_query_bank(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn vocab(n: usize) -> ClassVocabulary {
        ClassVocabulary::new((0..n).map(|i| (format!("c{i}"), i % 2 == 0))).unwrap()
    }

    fn bank(rows: usize, classes: usize) -> QueryBankSource<f64> {
        QueryBankSource {
            vocab: vocab(classes),
            embeddings: Matrix::from_fn(rows, 2, |r, c| (r * 2 + c) as f64 * 0.5),
            provenance: Provenance::File,
            synth: None,
        }
    }

    fn samples() -> SampleSet<f64> {
        SampleSet {
            vocab: vocab(3),
            records: vec![
                SampleRecord::new(Matrix::from_fn(2, 3, |r, c| (r + c) as f64 * 0.25), vec![2, 0]),
                SampleRecord::new(Matrix::from_fn(2, 3, |r, c| r as f64 - c as f64), vec![]),
            ],
            synth: None,
        }
    }

    fn format_err(e: Error) -> FormatError {
        match e {
            Error::Format(f) => f,
            other => panic!("expected a format error, got {other}"),
        }
    }

    #[test]
    fn samples_roundtrip() {
        let set = samples();
        let bytes = encode_samples(&set).unwrap();
        assert_eq!(&bytes[..6], MAGIC);
        assert_eq!(bytes[8], 1);
        assert_eq!(decode_samples::<f64>(&bytes).unwrap(), set);
    }

    #[test]
    fn corrupted_payload_byte_fails_checksum() {
        let mut bytes = encode_samples(&samples()).unwrap();
        let i = bytes.len() - 10;
        bytes[i] ^= 0x40;
        assert!(matches!(format_err(decode_samples::<f64>(&bytes).unwrap_err()), FormatError::Checksum { .. }));
    }

    #[test]
    fn corrupted_label_count_is_still_a_checksum_error() {
        let set = samples();
        let mut bytes = encode_samples(&set).unwrap();
        let header_len = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        bytes[PRELUDE + header_len] = 0xff;
        assert!(matches!(format_err(decode_samples::<f64>(&bytes).unwrap_err()), FormatError::Checksum { .. }));
    }

    #[test]
    fn truncated_file() {
        let bytes = encode_samples(&samples()).unwrap();
        let cut = &bytes[..bytes.len() - 9];
        assert!(matches!(format_err(decode_samples::<f64>(cut).unwrap_err()), FormatError::Truncated(_)));
        assert!(matches!(format_err(decode_samples::<f64>(&bytes[..4]).unwrap_err()), FormatError::Truncated(_)));
    }

    #[test]
    fn magic_version_and_section() {
        let mut bytes = encode_samples(&samples()).unwrap();
        assert!(matches!(
            format_err(decode_query_bank::<f64>(&bytes).unwrap_err()),
            FormatError::WrongSection { expected: 2, found: 1 }
        ));
        bytes[6] = 9;
        assert!(matches!(format_err(decode_samples::<f64>(&bytes).unwrap_err()), FormatError::UnsupportedVersion(9)));
        bytes[0] = b'X';
        assert!(matches!(format_err(decode_samples::<f64>(&bytes).unwrap_err()), FormatError::BadMagic));
    }

    #[test]
    fn bank_rows_must_match_vocabulary() {
        // Build a consistent frame by hand whose header claims 3 rows for 4 classes.
        let b = bank(3, 3);
        let mut payload = Vec::new();
        push_f32s(&mut payload, b.embeddings.as_slice());
        let header = QueryBankHeader {
            vocabulary: vocab(4).entries().to_vec(),
            class_count: 3,
            text_dim: 2,
            provenance: Provenance::File,
            synth: None,
        };
        let bytes = encode_frame(Section::QueryBank, &header, &payload).unwrap();
        assert!(matches!(format_err(decode_query_bank::<f64>(&bytes).unwrap_err()), FormatError::Inconsistent(_)));
        assert!(encode_query_bank(&bank(3, 4)).is_err());
    }

    #[test]
    fn query_bank_roundtrip() {
        let b = bank(4, 4);
        let back = decode_query_bank::<f64>(&encode_query_bank(&b).unwrap()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn out_of_range_label_rejected_on_write() {
        let mut set = samples();
        set.records[0].labels = vec![7];
        assert!(encode_samples(&set).is_err());
    }

    #[test]
    fn atomic_write_and_read() {
        let dir = std::env::temp_dir().join(format!("cdec-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.cdec");
        write_samples(&path, &samples()).unwrap();
        assert_eq!(read_samples::<f64>(&path).unwrap(), samples());
        let leftovers: Vec<_> = std::fs::read_dir(&dir).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sample_set() -> impl Strategy<Value = SampleSet<f64>> {
            (1usize..5, 1usize..4, 1usize..4, 0usize..6).prop_flat_map(|(classes, n, d, count)| {
                let record = (
                    proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n * d),
                    proptest::collection::btree_set(0..classes, 0..=classes),
                )
                    .prop_map(move |(vals, labels)| {
                        SampleRecord::new(
                            Matrix::new(n, d, vals.into_iter().map(f64::from).collect()).unwrap(),
                            labels.into_iter().collect(),
                        )
                    });
                proptest::collection::vec(record, count).prop_map(move |records| SampleSet {
                    vocab: ClassVocabulary::new((0..classes).map(|i| (format!("k{i}"), i == 0 || i % 3 != 0))).unwrap(),
                    records,
                    synth: None,
                })
            })
        }

        proptest! {
            #[test]
            fn f32_representable_sets_roundtrip_bit_exactly(set in sample_set()) {
                let bytes = encode_samples(&set).unwrap();
                let back = decode_samples::<f64>(&bytes).unwrap();
                prop_assert_eq!(&back, &set);
                prop_assert_eq!(encode_samples(&back).unwrap(), bytes);
            }
        }
    }
}
