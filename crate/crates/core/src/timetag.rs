//! Time tags, local clock models and the BPTT record file.
//!
//! Layout (little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "BPTT"
//!      4     2  version (1)
//!      6     1  clock_id
//!      7     1  swap_state (0 = plate0, 1 = plate45)
//!      8     2  resolution_ps
//!     10     4  duration_s (rounded up)
//!     14     8  count
//!     22  16·n  records: timestamp_fs i64, channel u8, 7 bytes zero padding
//!      …     4  CRC-32 (IEEE) of the record bytes
//! ```

use std::path::Path;

use thiserror::Error;

use crate::channel::SwapState;

pub const MAGIC: [u8; 4] = *b"BPTT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 22;
pub const RECORD_LEN: usize = 16;
pub const FS_PER_PS: i64 = 1000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TimeTagError {
    #[error("timestamp out of 64-bit femtosecond range")]
    Range,
    #[error("invalid clock: {0}")]
    Clock(String),
    #[error("timestamps not sorted at index {index}")]
    Unsorted { index: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic {0:02x?}, expected \"BPTT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("invalid swap state code {0}")]
    BadSwapState(u8),
    #[error("invalid channel code {code} in record {index}")]
    BadChannel { index: usize, code: u8 },
    #[error("non-monotone timestamp at record {index}")]
    NonMonotone { index: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum StreamIoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Decode { path: String, source: DecodeError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Detector {
    D1,
    D2,
}

impl Detector {
    pub fn code(self) -> u8 {
        match self {
            Detector::D1 => 1,
            Detector::D2 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Detector> {
        match code {
            1 => Some(Detector::D1),
            2 => Some(Detector::D2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimeTag {
    /// Femtoseconds since run start on the recording clock.
    pub timestamp_fs: i64,
    pub detector: Detector,
}

/// Local time base of an event timer. Readings are
/// `t + offset + drift·t[s]`, quantized to `resolution_ps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClockModel {
    pub offset_ps: f64,
    pub drift_ps_per_s: f64,
    pub resolution_ps: f64,
}

impl Default for ClockModel {
    fn default() -> Self {
        ClockModel { offset_ps: 0.0, drift_ps_per_s: 0.0, resolution_ps: 3.0 }
    }
}

impl ClockModel {
    pub fn with_offset(offset_ps: f64) -> Self {
        ClockModel { offset_ps, ..Default::default() }
    }

    pub fn resolution_fs(&self) -> i64 {
        (self.resolution_ps * FS_PER_PS as f64).round() as i64
    }

    pub fn validate(&self) -> Result<(), TimeTagError> {
        if !(self.resolution_ps > 0.0 && self.resolution_fs() > 0) {
            return Err(TimeTagError::Clock("resolution must be positive".into()));
        }
        if !self.offset_ps.is_finite() || !self.drift_ps_per_s.is_finite() {
            return Err(TimeTagError::Clock("offset and drift must be finite".into()));
        }
        Ok(())
    }
}

/// Reading of `clock` for an event at true time `true_ps`, in femtoseconds
/// on the clock's quantization grid (round half to even).
pub fn apply_clock(true_ps: f64, clock: &ClockModel) -> Result<i64, TimeTagError> {
    let reading_ps = true_ps + clock.offset_ps + clock.drift_ps_per_s * true_ps * 1e-12;
    let res_fs = clock.resolution_fs();
    let steps = (reading_ps * FS_PER_PS as f64 / res_fs as f64).round_ties_even();
    // i64::MAX as f64 rounds up to 2^63, so compare strictly
    if !steps.is_finite() || steps.abs() >= i64::MAX as f64 {
        return Err(TimeTagError::Range);
    }
    (steps as i64).checked_mul(res_fs).ok_or(TimeTagError::Range)
}

/// One detector's time history for one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagStream {
    pub clock_id: u8,
    pub swap_state: SwapState,
    pub resolution_ps: u16,
    pub duration_s: u32,
    tags: Vec<TimeTag>,
}

impl TagStream {
    pub fn new(
        clock_id: u8,
        swap_state: SwapState,
        resolution_ps: u16,
        duration_s: u32,
        tags: Vec<TimeTag>,
    ) -> Result<Self, TimeTagError> {
        if let Some(index) = first_unsorted(&tags) {
            return Err(TimeTagError::Unsorted { index });
        }
        Ok(TagStream { clock_id, swap_state, resolution_ps, duration_s, tags })
    }

    pub fn tags(&self) -> &[TimeTag] {
        &self.tags
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.tags.iter().map(|t| t.timestamp_fs).collect()
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn into_tags(self) -> Vec<TimeTag> {
        self.tags
    }
}

fn first_unsorted(tags: &[TimeTag]) -> Option<usize> {
    tags.windows(2).position(|w| w[1].timestamp_fs < w[0].timestamp_fs).map(|i| i + 1)
}

/// Translates every timestamp by `delta_fs`.
pub fn shift_stream(stream: &TagStream, delta_fs: i64) -> Result<TagStream, TimeTagError> {
    let tags = stream
        .tags
        .iter()
        .map(|t| {
            t.timestamp_fs
                .checked_add(delta_fs)
                .map(|timestamp_fs| TimeTag { timestamp_fs, detector: t.detector })
                .ok_or(TimeTagError::Range)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TagStream { tags, ..stream.clone() })
}

pub fn encode_stream(stream: &TagStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.tags.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(stream.clock_id);
    out.push(stream.swap_state.code());
    out.extend_from_slice(&stream.resolution_ps.to_le_bytes());
    out.extend_from_slice(&stream.duration_s.to_le_bytes());
    out.extend_from_slice(&(stream.tags.len() as u64).to_le_bytes());
    for tag in &stream.tags {
        out.extend_from_slice(&tag.timestamp_fs.to_le_bytes());
        out.push(tag.detector.code());
        out.extend_from_slice(&[0u8; 7]);
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn take<const N: usize>(bytes: &[u8], at: usize) -> Result<[u8; N], DecodeError> {
    bytes
        .get(at..at + N)
        .map(|s| s.try_into().expect("slice length is N"))
        .ok_or(DecodeError::Truncated { needed: at + N, available: bytes.len() })
}

pub fn decode_stream(bytes: &[u8]) -> Result<TagStream, DecodeError> {
    let magic = take::<4>(bytes, 0)?;
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(take(bytes, 4)?);
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let [clock_id] = take::<1>(bytes, 6)?;
    let [swap_code] = take::<1>(bytes, 7)?;
    let swap_state = SwapState::from_code(swap_code).ok_or(DecodeError::BadSwapState(swap_code))?;
    let resolution_ps = u16::from_le_bytes(take(bytes, 8)?);
    let duration_s = u32::from_le_bytes(take(bytes, 10)?);
    let count = u64::from_le_bytes(take(bytes, 14)?);

    let payload_len = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(RECORD_LEN))
        .ok_or(DecodeError::Truncated { needed: usize::MAX, available: bytes.len() })?;
    let crc_at = HEADER_LEN + payload_len;
    let stored = u32::from_le_bytes(take(bytes, crc_at)?);
    let payload = &bytes[HEADER_LEN..crc_at];
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(DecodeError::Checksum { stored, computed });
    }
    if bytes.len() > crc_at + 4 {
        return Err(DecodeError::TrailingBytes(bytes.len() - crc_at - 4));
    }

    let mut tags = Vec::with_capacity(count as usize);
    let mut last = i64::MIN;
    for (index, rec) in payload.chunks_exact(RECORD_LEN).enumerate() {
        let timestamp_fs = i64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
        let detector = Detector::from_code(rec[8]).ok_or(DecodeError::BadChannel { index, code: rec[8] })?;
        if timestamp_fs < last {
            return Err(DecodeError::NonMonotone { index });
        }
        last = timestamp_fs;
        tags.push(TimeTag { timestamp_fs, detector });
    }
    Ok(TagStream { clock_id, swap_state, resolution_ps, duration_s, tags })
}

pub fn write_stream(path: &Path, stream: &TagStream) -> Result<(), StreamIoError> {
    std::fs::write(path, encode_stream(stream))
        .map_err(|source| StreamIoError::Io { path: path.display().to_string(), source })
}

pub fn read_stream(path: &Path) -> Result<TagStream, StreamIoError> {
    let bytes = std::fs::read(path).map_err(|source| StreamIoError::Io { path: path.display().to_string(), source })?;
    decode_stream(&bytes).map_err(|source| StreamIoError::Decode { path: path.display().to_string(), source })
}
