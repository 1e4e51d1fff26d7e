//! `STVB` bank files. Layout is described in `docs/formats.md`.

use std::path::Path;

use super::{BankEntry, ExclusionPolicy, LanguageVectorBank};
use crate::corpus::{LanguageTag, Script};
use crate::error::{Error, Result};
use crate::fsutil::{self, put_f32s, put_string, Reader};

pub const BANK_MAGIC: &[u8; 4] = b"STVB";
pub const BANK_VERSION: u32 = 1;

impl LanguageVectorBank {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&self.model_hash);
        out.extend_from_slice(&(self.n_layers as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_model as u32).to_le_bytes());
        out.push(match self.exclusion {
            ExclusionPolicy::FirstPosition => 1,
        });
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_string(&mut out, &e.tag.code);
            out.push(e.tag.script.to_byte());
            let (lo, hi) = e.tag.script.token_range().unwrap_or((0, 0));
            out.extend_from_slice(&lo.to_le_bytes());
            out.extend_from_slice(&hi.to_le_bytes());
            out.extend_from_slice(&e.samples.to_le_bytes());
            out.extend_from_slice(&e.slice_hash);
        }
        for e in &self.entries {
            put_f32s(&mut out, &e.vectors);
        }
        fsutil::seal_crc(&mut out);
        out
    }

    /// Size of [`LanguageVectorBank::encode`] in bytes:
    /// 53-byte header, 51 bytes plus the code per table entry, the vectors,
    /// and a 4-byte checksum.
    pub fn encoded_len(&self) -> usize {
        let header = 4 + 4 + 32 + 4 + 4 + 1 + 4;
        let table: usize = self
            .entries
            .iter()
            .map(|e| 2 + e.tag.code.len() + 1 + 4 + 4 + 8 + 32)
            .sum();
        header + table + self.entries.len() * self.n_layers * self.d_model * 4 + 4
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != BANK_MAGIC {
            return Err(Error::CorruptFile("not an STVB bank".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != BANK_VERSION {
            return Err(Error::VersionMismatch {
                expected: BANK_VERSION,
                found: version,
            });
        }
        let body = fsutil::check_crc(bytes)?;
        let mut r = Reader::new(&body[8..]);
        let mut model_hash = [0u8; 32];
        model_hash.copy_from_slice(r.take(32)?);
        let n_layers = r.u32()? as usize;
        let d = r.u32()? as usize;
        match r.u8()? {
            1 => {}
            other => return Err(Error::CorruptFile(format!("unknown exclusion policy {other}"))),
        }
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            let code = r.string()?;
            let sb = r.u8()?;
            let lo = r.u32()?;
            let hi = r.u32()?;
            let script = Script::from_byte(sb, lo, hi)
                .ok_or_else(|| Error::CorruptFile(format!("bad script tag {sb} for {code}")))?;
            let samples = r.u64()?;
            let mut slice_hash = [0u8; 32];
            slice_hash.copy_from_slice(r.take(32)?);
            table.push((LanguageTag::new(code, script)?, samples, slice_hash));
        }
        let mut entries = Vec::with_capacity(n);
        for (tag, samples, slice_hash) in table {
            entries.push(BankEntry {
                tag,
                vectors: r.f32s(n_layers * d)?,
                samples,
                slice_hash,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::CorruptFile("trailing bytes".into()));
        }
        LanguageVectorBank::from_entries(n_layers, d, model_hash, entries)
    }
}

pub fn save_bank(bank: &LanguageVectorBank, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &bank.encode())
}

pub fn load_bank(path: &Path) -> Result<LanguageVectorBank> {
    LanguageVectorBank::decode(&fsutil::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::bank_from;
    use super::*;

    fn bank(n_lang: usize, n_layers: usize, d: usize) -> LanguageVectorBank {
        let codes: Vec<String> = (0..n_lang).map(|i| format!("l{i:02}")).collect();
        let vectors: Vec<(&str, Vec<Vec<f32>>)> = codes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                (
                    c.as_str(),
                    (0..n_layers)
                        .map(|l| (0..d).map(|k| (i * 31 + l * 7 + k) as f32 * 0.01 - 0.5).collect())
                        .collect(),
                )
            })
            .collect();
        bank_from(&vectors)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let b = bank(3, 2, 5);
        let back = LanguageVectorBank::decode(&b.encode()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.encode(), b.encode());
    }

    #[test]
    fn truncated_and_flipped_files_are_corrupt() {
        let bytes = bank(2, 2, 4).encode();
        assert!(matches!(
            LanguageVectorBank::decode(&bytes[..bytes.len() - 3]),
            Err(Error::CorruptFile(_))
        ));
        let mut f = bytes.clone();
        f[60] ^= 0x40;
        assert!(matches!(LanguageVectorBank::decode(&f), Err(Error::CorruptFile(_))));
        let mut v = bytes;
        v[4] = 9;
        assert!(matches!(
            LanguageVectorBank::decode(&v),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn file_size_follows_layout() {
        // 18 languages, 4 layers, d = 64, codes of 3 bytes
        let b = bank(18, 4, 64);
        let header = 53;
        let table = 18 * (51 + 3);
        let payload = 18 * 4 * 64 * 4;
        assert_eq!(b.encode().len(), header + table + payload + 4);
        assert_eq!(b.encoded_len(), b.encode().len());
    }
}
