//! Adapter persistence and the in-memory catalog.
//!
//! One adapter per file, little-endian fixed layout:
//!
//! | offset | size | field                                         |
//! |--------|------|-----------------------------------------------|
//! | 0      | 4    | magic `"FLRA"`                                |
//! | 4      | 2    | version (u16 LE, currently 1)                 |
//! | 6      | 1    | kind (0 = lora, 1 = flora, 2 = ia3)           |
//! | 7      | 4    | d (u32 LE; 0 for ia3)                         |
//! | 11     | 4    | k (u32 LE)                                    |
//! | 15     | 4    | r (u32 LE; 0 for ia3)                         |
//! | 19     | 1    | dtype (0 = f32, 1 = f64)                      |
//! | 20     | 1    | reduction (0 = sum, 1 = mean; flora only)     |
//!
//! followed by the row-major little-endian payload: `B` then `A` for
//! lora/flora, the scale vector for ia3. Bundles are stored as a directory of
//! per-placement files plus a `manifest` of `placement=file` lines.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::RwLock;

use crate::adapters::{AdapterKind, AdapterRecord, FloraAdapter, Ia3Adapter, LoraAdapter};
use crate::error::{Error, Result};
use crate::model::{AdapterBundle, Placement};
use crate::numkit::{Dtype, Reduction, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"FLRA";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_BYTES: u64 = 21;

/// Parsed header of an adapter file.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct AdapterFileHeader {
    pub version: u16,
    pub kind: AdapterKind,
    pub d: u32,
    pub k: u32,
    pub r: u32,
    pub dtype: Dtype,
    pub reduction: Reduction,
}

impl AdapterFileHeader {
    /// Payload length in elements implied by the header.
    pub fn payload_elems(&self) -> u64 {
        match self.kind {
            AdapterKind::Ia3 => u64::from(self.k),
            _ => u64::from(self.r) * (u64::from(self.d) + u64::from(self.k)),
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        self.payload_elems() * self.dtype.size_bytes() as u64
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&self.d.to_le_bytes());
        out.extend_from_slice(&self.k.to_le_bytes());
        out.extend_from_slice(&self.r.to_le_bytes());
        out.push(self.dtype.code());
        out.push(self.reduction.code());
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES as usize {
            return Err(Error::Format(format!(
                "file too short for header: {} bytes, need {HEADER_BYTES}",
                bytes.len()
            )));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:02x?} at offset 0, expected \"FLRA\"",
                &bytes[0..4]
            )));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let kind = AdapterKind::from_code(bytes[6])
            .ok_or_else(|| Error::Format(format!("unknown kind byte {} at offset 6", bytes[6])))?;
        let d = u32::from_le_bytes(bytes[7..11].try_into().unwrap());
        let k = u32::from_le_bytes(bytes[11..15].try_into().unwrap());
        let r = u32::from_le_bytes(bytes[15..19].try_into().unwrap());
        let dtype = Dtype::from_code(bytes[19]).ok_or_else(|| {
            Error::Format(format!("unknown dtype byte {} at offset 19", bytes[19]))
        })?;
        let reduction = Reduction::from_code(bytes[20]).ok_or_else(|| {
            Error::Format(format!("unknown reduction byte {} at offset 20", bytes[20]))
        })?;
        let header = Self {
            version,
            kind,
            d,
            k,
            r,
            dtype,
            reduction,
        };
        header.validate_dims()?;
        Ok(header)
    }

    fn validate_dims(&self) -> Result<()> {
        match self.kind {
            AdapterKind::Ia3 => {
                if self.r != 0 {
                    return Err(Error::Format(format!(
                        "ia3 file declares rank {}, expected 0",
                        self.r
                    )));
                }
                if self.d != 0 {
                    return Err(Error::Format(format!(
                        "ia3 file declares d = {}, expected 0",
                        self.d
                    )));
                }
                if self.k == 0 {
                    return Err(Error::Dimension("ia3 file declares k = 0".into()));
                }
            }
            _ => {
                if self.d == 0 || self.k == 0 {
                    return Err(Error::Dimension(format!(
                        "{} file declares d = {}, k = {}; both must be positive",
                        self.kind.name(),
                        self.d,
                        self.k
                    )));
                }
                if self.r == 0 {
                    return Err(Error::Dimension(format!(
                        "{} file declares rank 0",
                        self.kind.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn header_for<T: Scalar>(record: &AdapterRecord<T>) -> AdapterFileHeader {
    let (d, k) = record.dims();
    let reduction = match record {
        AdapterRecord::Flora(ad) => ad.reduction,
        _ => Reduction::Sum,
    };
    AdapterFileHeader {
        version: FORMAT_VERSION,
        kind: record.kind(),
        d: d as u32,
        k: k as u32,
        r: record.rank() as u32,
        dtype: T::DTYPE,
        reduction,
    }
}

fn write_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serializes an adapter to its on-disk byte layout.
pub fn encode<T: Scalar>(record: &AdapterRecord<T>) -> Vec<u8> {
    let header = header_for(record);
    let mut out = header.encode();
    out.reserve(header.payload_bytes() as usize);
    match record {
        AdapterRecord::Lora(ad) => {
            write_tensor(&ad.b, &mut out);
            write_tensor(&ad.a, &mut out);
        }
        AdapterRecord::Flora(ad) => {
            write_tensor(&ad.b, &mut out);
            write_tensor(&ad.a, &mut out);
        }
        AdapterRecord::Ia3(ad) => write_tensor(&ad.scale, &mut out),
    }
    out
}

/// Writes `header + payload` to `path`; the round trip is byte-exact.
pub fn store<T: Scalar>(record: &AdapterRecord<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(record);
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Adapter of either element width, as read back from a file.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyAdapter {
    F32(AdapterRecord<f32>),
    F64(AdapterRecord<f64>),
}

impl AnyAdapter {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyAdapter::F32(_) => Dtype::F32,
            AnyAdapter::F64(_) => Dtype::F64,
        }
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            AnyAdapter::F32(r) => r.kind(),
            AnyAdapter::F64(r) => r.kind(),
        }
    }
}

fn read_tensor<T: Scalar>(
    bytes: &[u8],
    cursor: &mut usize,
    shape: Vec<usize>,
    section: &str,
) -> Result<Tensor<T>> {
    let elems: usize = shape.iter().product();
    let width = T::DTYPE.size_bytes();
    let need = elems * width;
    let avail = bytes.len().saturating_sub(*cursor);
    if avail < need {
        return Err(Error::Format(format!(
            "payload truncated in section `{section}`: need {need} bytes at offset {cursor}, {avail} remain"
        )));
    }
    let mut data = Vec::with_capacity(elems);
    for i in 0..elems {
        let off = *cursor + i * width;
        let v = T::read_le(&bytes[off..off + width]);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "section `{section}` element {i} (byte offset {off}) is {v}"
            )));
        }
        data.push(v);
    }
    *cursor += need;
    Ok(Tensor::from_parts(shape, data))
}

fn decode_typed<T: Scalar>(header: &AdapterFileHeader, bytes: &[u8]) -> Result<AdapterRecord<T>> {
    let mut cursor = HEADER_BYTES as usize;
    let expected = HEADER_BYTES + header.payload_bytes();
    // short files fall through so the section read names what is missing
    if (bytes.len() as u64) > expected {
        return Err(Error::Format(format!(
            "file has {} trailing bytes past the declared payload",
            bytes.len() as u64 - expected
        )));
    }
    let (d, k, r) = (header.d as usize, header.k as usize, header.r as usize);
    let record = match header.kind {
        AdapterKind::Lora => {
            let b = read_tensor(bytes, &mut cursor, vec![d, r], "factor B")?;
            let a = read_tensor(bytes, &mut cursor, vec![r, k], "factor A")?;
            AdapterRecord::Lora(LoraAdapter::new(0, b, a)?)
        }
        AdapterKind::Flora => {
            let b = read_tensor(bytes, &mut cursor, vec![d, r], "factor B")?;
            let a = read_tensor(bytes, &mut cursor, vec![r, k], "factor A")?;
            AdapterRecord::Flora(FloraAdapter::new(0, b, a, header.reduction)?)
        }
        AdapterKind::Ia3 => {
            let scale = read_tensor(bytes, &mut cursor, vec![k], "scale")?;
            AdapterRecord::Ia3(Ia3Adapter::new(0, scale)?)
        }
    };
    Ok(record)
}

/// Reads an adapter file at whichever element width it declares.
pub fn load_any(path: impl AsRef<Path>) -> Result<AnyAdapter> {
    let bytes = fs::read(path)?;
    let header = AdapterFileHeader::decode(&bytes)?;
    match header.dtype {
        Dtype::F32 => Ok(AnyAdapter::F32(decode_typed(&header, &bytes)?)),
        Dtype::F64 => Ok(AnyAdapter::F64(decode_typed(&header, &bytes)?)),
    }
}

/// Reads an adapter file, requiring the 64-bit element width.
pub fn load_f64(path: impl AsRef<Path>) -> Result<AdapterRecord<f64>> {
    match load_any(path)? {
        AnyAdapter::F64(r) => Ok(r),
        AnyAdapter::F32(_) => Err(Error::Format(
            "file holds f32 payload, f64 was required".into(),
        )),
    }
}

/// Reads an adapter file, requiring the 32-bit element width.
pub fn load_f32(path: impl AsRef<Path>) -> Result<AdapterRecord<f32>> {
    match load_any(path)? {
        AnyAdapter::F32(r) => Ok(r),
        AnyAdapter::F64(_) => Err(Error::Format(
            "file holds f64 payload, f32 was required".into(),
        )),
    }
}

/// Header fields plus payload accounting, for `adapter inspect`.
pub fn inspect(path: impl AsRef<Path>) -> Result<(AdapterFileHeader, u64)> {
    let bytes = fs::read(path)?;
    let header = AdapterFileHeader::decode(&bytes)?;
    let actual_payload = bytes.len() as u64 - HEADER_BYTES;
    if actual_payload != header.payload_bytes() {
        return Err(Error::Format(format!(
            "declared payload is {} bytes but {} bytes follow the header",
            header.payload_bytes(),
            actual_payload
        )));
    }
    Ok((header, actual_payload))
}

/// On-disk size of an adapter: header plus `r·(d + k)` elements for
/// lora/flora, `k` elements for ia3.
pub fn storage_bytes(kind: AdapterKind, d: u64, k: u64, r: u64, dtype: Dtype) -> u64 {
    let elems = match kind {
        AdapterKind::Ia3 => k,
        _ => r * (d + k),
    };
    HEADER_BYTES + elems * dtype.size_bytes() as u64
}

/// In-memory catalog keyed by adapter id. Mutations are serialized; reads are
/// concurrent-safe.
#[derive(Default)]
pub struct Registry {
    entries: RwLock<BTreeMap<u64, AnyAdapter>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, id: u64, adapter: AnyAdapter) {
        self.entries.write().expect("registry lock").insert(id, adapter);
    }

    pub fn get(&self, id: u64) -> Result<AnyAdapter> {
        self.entries
            .read()
            .expect("registry lock")
            .get(&id)
            .cloned()
            .ok_or(Error::NotFound(id))
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.read().expect("registry lock").keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("registry lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const MANIFEST_NAME: &str = "manifest";

/// Stores a bundle as a directory: one adapter file per placement plus a
/// `manifest` of `placement=file` lines.
pub fn store_bundle<T: Scalar>(bundle: &AdapterBundle<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (placement, record) in &bundle.slots {
        let file = format!("{}.flra", placement.name());
        store(record, dir.join(&file))?;
        manifest.push_str(&format!("{}={}\n", placement.name(), file));
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

/// Loads a bundle directory written by [`store_bundle`] at f64 width.
pub fn load_bundle_f64(dir: impl AsRef<Path>, id: u64) -> Result<AdapterBundle<f64>> {
    let dir = dir.as_ref();
    let manifest = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut slots = BTreeMap::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, file) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!(
                "manifest line {} is not `placement=file`: `{line}`",
                lineno + 1
            ))
        })?;
        let placement: Placement = name.parse()?;
        let record = load_f64(dir.join(file))?;
        slots.insert(placement, record);
    }
    Ok(AdapterBundle::new(id, slots))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapter, InitStrategy};
    use crate::model::BlockConfig;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("flora-registry-{tag}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn sample<T: Scalar>(kind: AdapterKind, r: usize) -> AdapterRecord<T> {
        init_adapter(kind, 6, 5, r.max(1), 42, InitStrategy::Random { std: 0.3 }).unwrap()
    }

    #[test]
    fn round_trip_all_kinds_and_dtypes_is_bitwise() {
        let dir = tmpdir("roundtrip");
        for kind in [AdapterKind::Lora, AdapterKind::Flora, AdapterKind::Ia3] {
            for r in [1usize, 8] {
                let path = dir.join(format!("{}-{r}-64.flra", kind.name()));
                let rec: AdapterRecord<f64> = sample(kind, r);
                store(&rec, &path).unwrap();
                match load_any(&path).unwrap() {
                    AnyAdapter::F64(back) => match (&rec, &back) {
                        (AdapterRecord::Lora(x), AdapterRecord::Lora(y)) => {
                            assert!(x.b.bitwise_eq(&y.b) && x.a.bitwise_eq(&y.a));
                        }
                        (AdapterRecord::Flora(x), AdapterRecord::Flora(y)) => {
                            assert!(x.b.bitwise_eq(&y.b) && x.a.bitwise_eq(&y.a));
                            assert_eq!(x.reduction, y.reduction);
                        }
                        (AdapterRecord::Ia3(x), AdapterRecord::Ia3(y)) => {
                            assert!(x.scale.bitwise_eq(&y.scale));
                        }
                        _ => panic!("kind changed in round trip"),
                    },
                    AnyAdapter::F32(_) => panic!("dtype changed in round trip"),
                }

                let path32 = dir.join(format!("{}-{r}-32.flra", kind.name()));
                let rec32: AdapterRecord<f32> = sample(kind, r);
                store(&rec32, &path32).unwrap();
                let bytes_before = fs::read(&path32).unwrap();
                let reloaded = match load_any(&path32).unwrap() {
                    AnyAdapter::F32(back) => back,
                    _ => panic!("dtype changed"),
                };
                // store the reloaded record again: the file must be identical
                store(&reloaded, &path32).unwrap();
                assert_eq!(bytes_before, fs::read(&path32).unwrap());
            }
        }
    }

    #[test]
    fn storage_bytes_matches_file_size() {
        let dir = tmpdir("sizes");
        for kind in [AdapterKind::Lora, AdapterKind::Flora, AdapterKind::Ia3] {
            for r in [1u64, 8] {
                let rec: AdapterRecord<f64> = sample(kind, r as usize);
                let path = dir.join(format!("size-{}-{r}.flra", kind.name()));
                store(&rec, &path).unwrap();
                let (d, k) = rec.dims();
                let want = storage_bytes(kind, d as u64, k as u64, rec.rank() as u64, Dtype::F64);
                assert_eq!(fs::metadata(&path).unwrap().len(), want);
            }
        }
        // d=k=1024, r=1, f32 → header + 4·2048
        assert_eq!(
            storage_bytes(AdapterKind::Lora, 1024, 1024, 1, Dtype::F32),
            HEADER_BYTES + 8192
        );
        // doubling r doubles the payload
        let one = storage_bytes(AdapterKind::Flora, 256, 256, 2, Dtype::F64) - HEADER_BYTES;
        let two = storage_bytes(AdapterKind::Flora, 256, 256, 4, Dtype::F64) - HEADER_BYTES;
        assert_eq!(two, 2 * one);
        // ia3 payload is independent of d
        assert_eq!(
            storage_bytes(AdapterKind::Ia3, 1, 64, 0, Dtype::F32),
            storage_bytes(AdapterKind::Ia3, 4096, 64, 0, Dtype::F32)
        );
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let dir = tmpdir("corrupt");
        let rec: AdapterRecord<f64> = sample(AdapterKind::Flora, 2);
        let path = dir.join("good.flra");
        store(&rec, &path).unwrap();
        let good = fs::read(&path).unwrap();

        // wrong magic
        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(dir.join("magic.flra"), &bad).unwrap();
        assert!(matches!(
            load_any(dir.join("magic.flra")),
            Err(Error::Format(m)) if m.contains("magic")
        ));

        // unsupported version
        let mut bad = good.clone();
        bad[4] = 9;
        fs::write(dir.join("version.flra"), &bad).unwrap();
        assert!(matches!(
            load_any(dir.join("version.flra")),
            Err(Error::UnsupportedVersion(9))
        ));

        // truncated payload names the missing section
        let cut = good.len() - 8 * 3;
        fs::write(dir.join("trunc.flra"), &good[..cut]).unwrap();
        match load_any(dir.join("trunc.flra")) {
            Err(Error::Format(m)) => assert!(m.contains("factor A"), "message was `{m}`"),
            other => panic!("expected truncation error, got {other:?}"),
        }

        // header truncated even before the payload
        fs::write(dir.join("tiny.flra"), &good[..10]).unwrap();
        assert!(matches!(
            load_any(dir.join("tiny.flra")),
            Err(Error::Format(_))
        ));

        // ia3 with nonzero rank
        let ia3: AdapterRecord<f64> = sample(AdapterKind::Ia3, 1);
        let mut bytes = encode(&ia3);
        bytes[15] = 3; // r field
        fs::write(dir.join("ia3rank.flra"), &bytes).unwrap();
        assert!(matches!(
            load_any(dir.join("ia3rank.flra")),
            Err(Error::Format(m)) if m.contains("rank")
        ));

        // flora with d = 0
        let mut bad = good.clone();
        bad[7..11].copy_from_slice(&0u32.to_le_bytes());
        fs::write(dir.join("zerod.flra"), &bad).unwrap();
        assert!(matches!(
            load_any(dir.join("zerod.flra")),
            Err(Error::Dimension(_))
        ));

        // NaN payload
        let mut bad = good.clone();
        bad[HEADER_BYTES as usize..HEADER_BYTES as usize + 8]
            .copy_from_slice(&f64::NAN.to_le_bytes());
        fs::write(dir.join("nan.flra"), &bad).unwrap();
        assert!(matches!(
            load_any(dir.join("nan.flra")),
            Err(Error::NonFinite(_))
        ));

        // trailing bytes past the declared payload
        let mut bad = good.clone();
        bad.extend_from_slice(&[0u8; 4]);
        fs::write(dir.join("trailing.flra"), &bad).unwrap();
        assert!(matches!(
            load_any(dir.join("trailing.flra")),
            Err(Error::Format(m)) if m.contains("trailing")
        ));
    }

    #[test]
    fn registry_lookup_is_total() {
        let reg = Registry::new();
        let rec: AdapterRecord<f64> = sample(AdapterKind::Lora, 2);
        reg.register(7, AnyAdapter::F64(rec.clone()));
        let got = reg.get(7).unwrap();
        assert_eq!(got, AnyAdapter::F64(rec));
        assert!(matches!(reg.get(8), Err(Error::NotFound(8))));
        assert_eq!(reg.ids(), vec![7]);
    }

    #[test]
    fn bundle_round_trip() {
        let cfg = BlockConfig::query_key(8, 2, 16).unwrap();
        let slots = cfg
            .placements
            .iter()
            .map(|&p| {
                (
                    p,
                    init_adapter::<f64>(AdapterKind::Flora, 8, 8, 2, p as u64, InitStrategy::Random { std: 0.1 })
                        .unwrap(),
                )
            })
            .collect();
        let bundle = AdapterBundle::new(3, slots);
        let dir = tmpdir("bundle").join("b3");
        store_bundle(&bundle, &dir).unwrap();
        let back = load_bundle_f64(&dir, 3).unwrap();
        assert_eq!(back.slots.len(), bundle.slots.len());
        for (p, rec) in &bundle.slots {
            let loaded = &back.slots[p];
            match (rec, loaded) {
                (AdapterRecord::Flora(x), AdapterRecord::Flora(y)) => {
                    assert!(x.b.bitwise_eq(&y.b) && x.a.bitwise_eq(&y.a));
                }
                _ => panic!("kind mismatch"),
            }
        }
    }
}
