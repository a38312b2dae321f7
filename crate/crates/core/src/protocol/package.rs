//! The transmissible update package and its bit-exact wire encoding.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DLTA" | u16 version | u8 method | u8 prng | u8 wire | u8 reserved
//! u64 seed | f64 hyper | u32 targeted-layer count | u32 record count
//! [u8; 32] model fingerprint
//! records: u32 layer_id | u8 kind | u8 entry_tag | u16 reserved
//!          u32 o | u32 i | u32 rn | u32 value_count | values
//! trailer: u32 item count | items: u16 name_len | name | u32 count | values
//! u32 crc32 over every preceding byte
//! ```
//!
//! Values are 32-bit reals on the wire by default; the debug wire mode keeps
//! 64 bits. Decoding a package and re-encoding it reproduces the input bytes
//! exactly.

use thiserror::Error;

pub const PACKAGE_MAGIC: [u8; 4] = *b"DLTA";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PackageError {
    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown method tag {0}")]
    UnknownMethod(u8),
    #[error("unknown record kind {0}")]
    UnknownRecordKind(u8),
    #[error("unknown prng algorithm id {0}")]
    UnknownPrng(u8),
    #[error("truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("malformed package: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodTag {
    Lra = 0,
    Ml = 1,
    Ka = 2,
    Rm = 3,
    Lru = 4,
}

impl MethodTag {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Result<Self, PackageError> {
        match v {
            0 => Ok(MethodTag::Lra),
            1 => Ok(MethodTag::Ml),
            2 => Ok(MethodTag::Ka),
            3 => Ok(MethodTag::Rm),
            4 => Ok(MethodTag::Lru),
            other => Err(PackageError::UnknownMethod(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MethodTag::Lra => "lra",
            MethodTag::Ml => "ml",
            MethodTag::Ka => "ka",
            MethodTag::Rm => "rm",
            MethodTag::Lru => "lru",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    /// Both truncated factors, L then R.
    LraFactors = 0,
    /// The mapping L only; R re-derives from the deployed weights.
    MlFactor = 1,
    /// U' then s' then V'; U and V re-derive from the deployed weights.
    KaFactors = 2,
    /// Selected scalars of one masked entry.
    MaskedEntry = 3,
    /// The additive mapping L only; R regenerates from the seed.
    LruFactor = 4,
    /// Full dense weight (degenerate-rank fallback, flagged by this kind).
    DenseWeight = 5,
}

impl RecordKind {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Result<Self, PackageError> {
        match v {
            0 => Ok(RecordKind::LraFactors),
            1 => Ok(RecordKind::MlFactor),
            2 => Ok(RecordKind::KaFactors),
            3 => Ok(RecordKind::MaskedEntry),
            4 => Ok(RecordKind::LruFactor),
            5 => Ok(RecordKind::DenseWeight),
            other => Err(PackageError::UnknownRecordKind(other)),
        }
    }
}

/// Entry tag for masked records.
pub const ENTRY_WEIGHT: u8 = 0;
pub const ENTRY_BIAS: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PackageHeader {
    pub version: u16,
    pub method: MethodTag,
    pub prng_algorithm: u8,
    pub wire64: bool,
    pub seed: u64,
    /// P for RM; the default rank or augmentation width otherwise.
    pub hyper: f64,
    /// Targeted Conv/FC layer count of the model the package applies to.
    pub layer_count: u32,
    /// SHA-256 of the deployed parameter store's canonical serialization.
    pub fingerprint: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub layer_id: u32,
    pub kind: RecordKind,
    pub entry_tag: u8,
    pub o: u32,
    pub i: u32,
    /// Rank, augmentation width or selected count, depending on kind.
    pub rn: u32,
    pub values: Vec<f64>,
}

/// The update package: header, per-layer learnable values, untargeted
/// parameters in full.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdatePackage {
    pub header: PackageHeader,
    pub records: Vec<LayerRecord>,
    pub untargeted: Vec<(String, Vec<f64>)>,
}

impl UpdatePackage {
    /// Transmitted learnable scalar count.
    pub fn scalar_count(&self) -> usize {
        self.records.iter().map(|r| r.values.len()).sum::<usize>()
            + self.untargeted.iter().map(|(_, v)| v.len()).sum::<usize>()
    }

    /// Size on the wire in bytes.
    pub fn wire_size(&self) -> usize {
        self.serialize().len()
    }

    /// Rounds every value through 32-bit precision. Applied once when the
    /// package is built in the default wire mode, so the in-memory package
    /// always equals what the edge will decode.
    pub fn quantize_to_f32(&mut self) {
        for record in &mut self.records {
            for v in &mut record.values {
                *v = *v as f32 as f64;
            }
        }
        for (_, values) in &mut self.untargeted {
            for v in values.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&PACKAGE_MAGIC);
        out.extend_from_slice(&self.header.version.to_le_bytes());
        out.push(self.header.method.as_u8());
        out.push(self.header.prng_algorithm);
        out.push(u8::from(self.header.wire64));
        out.push(0);
        out.extend_from_slice(&self.header.seed.to_le_bytes());
        out.extend_from_slice(&self.header.hyper.to_le_bytes());
        out.extend_from_slice(&self.header.layer_count.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.header.fingerprint);
        for record in &self.records {
            out.extend_from_slice(&record.layer_id.to_le_bytes());
            out.push(record.kind.as_u8());
            out.push(record.entry_tag);
            out.extend_from_slice(&0u16.to_le_bytes());
            out.extend_from_slice(&record.o.to_le_bytes());
            out.extend_from_slice(&record.i.to_le_bytes());
            out.extend_from_slice(&record.rn.to_le_bytes());
            out.extend_from_slice(&(record.values.len() as u32).to_le_bytes());
            write_values(&mut out, &record.values, self.header.wire64);
        }
        out.extend_from_slice(&(self.untargeted.len() as u32).to_le_bytes());
        for (name, values) in &self.untargeted {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u32).to_le_bytes());
            write_values(&mut out, values, self.header.wire64);
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<UpdatePackage, PackageError> {
        if bytes.len() < 4 {
            return Err(PackageError::Truncated {
                need: 4,
                have: bytes.len(),
            });
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[..4]);
        if magic != PACKAGE_MAGIC {
            return Err(PackageError::BadMagic {
                expected: PACKAGE_MAGIC,
                got: magic,
            });
        }
        // Checksum first: a corrupt package is rejected before any field is
        // interpreted.
        if bytes.len() < 8 {
            return Err(PackageError::Truncated {
                need: 8,
                have: bytes.len(),
            });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32(body);
        if stored != computed {
            return Err(PackageError::CrcMismatch { stored, computed });
        }

        let mut r = Reader::new(body);
        r.skip(4)?;
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(PackageError::UnsupportedVersion(version));
        }
        let method = MethodTag::from_u8(r.u8()?)?;
        let prng_algorithm = r.u8()?;
        if prng_algorithm != crate::rng::PRNG_ALGORITHM_ID {
            return Err(PackageError::UnknownPrng(prng_algorithm));
        }
        let wire64 = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(PackageError::Malformed(format!("wire flag {other}"))),
        };
        r.skip(1)?;
        let seed = r.u64()?;
        let hyper = r.f64()?;
        let layer_count = r.u32()?;
        let record_count = r.u32()? as usize;
        let mut fingerprint = [0u8; 32];
        fingerprint.copy_from_slice(r.take(32)?);

        let mut records = Vec::with_capacity(record_count.min(4096));
        for _ in 0..record_count {
            let layer_id = r.u32()?;
            let kind = RecordKind::from_u8(r.u8()?)?;
            let entry_tag = r.u8()?;
            r.skip(2)?;
            let o = r.u32()?;
            let i = r.u32()?;
            let rn = r.u32()?;
            let count = r.u32()? as usize;
            let values = r.values(count, wire64)?;
            records.push(LayerRecord {
                layer_id,
                kind,
                entry_tag,
                o,
                i,
                rn,
                values,
            });
        }
        let untargeted_count = r.u32()? as usize;
        let mut untargeted = Vec::with_capacity(untargeted_count.min(4096));
        for _ in 0..untargeted_count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| PackageError::Malformed("non-utf8 trailer name".into()))?;
            let count = r.u32()? as usize;
            let values = r.values(count, wire64)?;
            untargeted.push((name, values));
        }
        if !r.at_end() {
            return Err(PackageError::Malformed(format!(
                "{} trailing bytes after trailer",
                r.remaining()
            )));
        }
        Ok(UpdatePackage {
            header: PackageHeader {
                version,
                method,
                prng_algorithm,
                wire64,
                seed,
                hyper,
                layer_count,
                fingerprint,
            },
            records,
            untargeted,
        })
    }
}

fn write_values(out: &mut Vec<u8>, values: &[f64], wire64: bool) {
    if wire64 {
        for &v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    } else {
        for &v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
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

    fn take(&mut self, n: usize) -> Result<&'a [u8], PackageError> {
        if self.pos + n > self.buf.len() {
            return Err(PackageError::Truncated {
                need: self.pos + n,
                have: self.buf.len(),
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn skip(&mut self, n: usize) -> Result<(), PackageError> {
        self.take(n).map(|_| ())
    }

    fn u8(&mut self) -> Result<u8, PackageError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, PackageError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PackageError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PackageError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, PackageError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values(&mut self, count: usize, wire64: bool) -> Result<Vec<f64>, PackageError> {
        let width = if wire64 { 8 } else { 4 };
        let raw = self.take(count * width)?;
        let mut out = Vec::with_capacity(count);
        if wire64 {
            for chunk in raw.chunks_exact(8) {
                out.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        } else {
            for chunk in raw.chunks_exact(4) {
                out.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Ok(out)
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
const fn build_crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut n = 0usize;
    while n < 256 {
        let mut c = n as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[n] = c;
        n += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = build_crc_table();

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = (crc >> 8) ^ CRC_TABLE[((crc ^ b as u32) & 0xFF) as usize];
    }
    !crc
}
