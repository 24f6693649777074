//! Just enough ZIP to read and write NPZ archives.
//!
//! Writing always uses STORED entries with a fixed timestamp so identical
//! contents give identical bytes. Reading accepts STORED and DEFLATE entries,
//! including the ZIP64 size fields that numpy emits.

use std::io::Read;

use crate::error::{format_err, Result};

const LOCAL_SIG: u32 = 0x0403_4b50;
const CENTRAL_SIG: u32 = 0x0201_4b50;
const EOCD_SIG: u32 = 0x0605_4b50;
const ZIP64_EOCD_SIG: u32 = 0x0606_4b50;
/// 1980-01-01 in MS-DOS date format.
const DOS_DATE: u16 = (1 << 5) | 1;

fn u16_at(b: &[u8], off: usize) -> Result<u16> {
    match b.get(off..off + 2) {
        Some(s) => Ok(u16::from_le_bytes([s[0], s[1]])),
        None => format_err(off, "unexpected end of zip data"),
    }
}

fn u32_at(b: &[u8], off: usize) -> Result<u32> {
    match b.get(off..off + 4) {
        Some(s) => Ok(u32::from_le_bytes(s.try_into().unwrap())),
        None => format_err(off, "unexpected end of zip data"),
    }
}

fn u64_at(b: &[u8], off: usize) -> Result<u64> {
    match b.get(off..off + 8) {
        Some(s) => Ok(u64::from_le_bytes(s.try_into().unwrap())),
        None => format_err(off, "unexpected end of zip data"),
    }
}

/// Serializes `(name, payload)` entries in order.
pub fn write_zip(entries: &[(String, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut central = Vec::new();
    for (name, data) in entries {
        let offset = out.len() as u32;
        let crc = crc32fast::hash(data);
        let size = data.len() as u32;
        let fields = |buf: &mut Vec<u8>| {
            buf.extend_from_slice(&20u16.to_le_bytes()); // version needed
            buf.extend_from_slice(&0u16.to_le_bytes()); // flags
            buf.extend_from_slice(&0u16.to_le_bytes()); // method: stored
            buf.extend_from_slice(&0u16.to_le_bytes()); // time
            buf.extend_from_slice(&DOS_DATE.to_le_bytes());
            buf.extend_from_slice(&crc.to_le_bytes());
            buf.extend_from_slice(&size.to_le_bytes());
            buf.extend_from_slice(&size.to_le_bytes());
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(&0u16.to_le_bytes()); // extra length
        };
        out.extend_from_slice(&LOCAL_SIG.to_le_bytes());
        fields(&mut out);
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(data);

        central.extend_from_slice(&CENTRAL_SIG.to_le_bytes());
        central.extend_from_slice(&20u16.to_le_bytes()); // version made by
        fields(&mut central);
        central.extend_from_slice(&0u16.to_le_bytes()); // comment length
        central.extend_from_slice(&0u16.to_le_bytes()); // disk number
        central.extend_from_slice(&0u16.to_le_bytes()); // internal attrs
        central.extend_from_slice(&0u32.to_le_bytes()); // external attrs
        central.extend_from_slice(&offset.to_le_bytes());
        central.extend_from_slice(name.as_bytes());
    }
    let cd_offset = out.len() as u32;
    out.extend_from_slice(&central);
    out.extend_from_slice(&EOCD_SIG.to_le_bytes());
    out.extend_from_slice(&[0; 4]); // disk numbers
    out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    out.extend_from_slice(&(central.len() as u32).to_le_bytes());
    out.extend_from_slice(&cd_offset.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out
}

fn find_eocd(b: &[u8]) -> Result<usize> {
    if b.len() < 22 {
        return format_err(b.len(), "too short for a zip archive");
    }
    let lowest = b.len().saturating_sub(22 + u16::MAX as usize);
    (lowest..=b.len() - 22)
        .rev()
        .find(|&i| u32_at(b, i).ok() == Some(EOCD_SIG))
        .map_or_else(|| format_err(b.len(), "end of central directory not found"), Ok)
}

/// Reads all entries as `(name, payload)` in central-directory order.
pub fn read_zip(b: &[u8]) -> Result<Vec<(String, Vec<u8>)>> {
    let eocd = find_eocd(b)?;
    let mut count = u16_at(b, eocd + 10)? as u64;
    let mut cd = u32_at(b, eocd + 16)? as u64;
    if (count == 0xFFFF || cd == 0xFFFF_FFFF) && eocd >= 20 && u32_at(b, eocd - 20)? == 0x0706_4b50 {
        let z64 = u64_at(b, eocd - 12)? as usize;
        if u32_at(b, z64)? != ZIP64_EOCD_SIG {
            return format_err(z64, "bad zip64 end of central directory");
        }
        count = u64_at(b, z64 + 32)?;
        cd = u64_at(b, z64 + 48)?;
    }
    let mut pos = cd as usize;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        if u32_at(b, pos)? != CENTRAL_SIG {
            return format_err(pos, "bad central directory signature");
        }
        let flags = u16_at(b, pos + 8)?;
        let method = u16_at(b, pos + 10)?;
        let crc = u32_at(b, pos + 16)?;
        let mut csize = u32_at(b, pos + 20)? as u64;
        let mut usize_ = u32_at(b, pos + 24)? as u64;
        let name_len = u16_at(b, pos + 28)? as usize;
        let extra_len = u16_at(b, pos + 30)? as usize;
        let comment_len = u16_at(b, pos + 32)? as usize;
        let mut local = u32_at(b, pos + 42)? as u64;
        let name_off = pos + 46;
        let Some(name) = b.get(name_off..name_off + name_len) else {
            return format_err(name_off, "truncated entry name");
        };
        let name = String::from_utf8_lossy(name).into_owned();
        if flags & 1 != 0 {
            return format_err(pos, format!("entry '{name}' is encrypted"));
        }
        // ZIP64 extended information replaces saturated fields, in order.
        let mut e = name_off + name_len;
        let extra_end = e + extra_len;
        while e + 4 <= extra_end {
            let (id, len) = (u16_at(b, e)?, u16_at(b, e + 2)? as usize);
            if id == 1 {
                let mut f = e + 4;
                for field in [&mut usize_, &mut csize, &mut local] {
                    if *field == 0xFFFF_FFFF {
                        *field = u64_at(b, f)?;
                        f += 8;
                    }
                }
            }
            e += 4 + len;
        }
        pos = extra_end + comment_len;

        let lh = local as usize;
        if u32_at(b, lh)? != LOCAL_SIG {
            return format_err(lh, format!("bad local header for '{name}'"));
        }
        let data_off = lh + 30 + u16_at(b, lh + 26)? as usize + u16_at(b, lh + 28)? as usize;
        let Some(raw) = b.get(data_off..data_off + csize as usize) else {
            return format_err(
                data_off,
                format!("entry '{name}' truncated: expected {csize} bytes, got {}", b.len().saturating_sub(data_off)),
            );
        };
        let data = match method {
            0 => raw.to_vec(),
            8 => {
                let mut d = Vec::with_capacity(usize_ as usize);
                if let Err(e) = flate2::read::DeflateDecoder::new(raw).read_to_end(&mut d) {
                    return format_err(data_off, format!("entry '{name}': {e}"));
                }
                d
            }
            m => return format_err(lh + 8, format!("entry '{name}': unsupported compression method {m}")),
        };
        if data.len() as u64 != usize_ {
            return format_err(
                data_off,
                format!("entry '{name}': expected {usize_} bytes, got {}", data.len()),
            );
        }
        if crc32fast::hash(&data) != crc {
            return format_err(data_off, format!("entry '{name}': CRC mismatch"));
        }
        entries.push((name, data));
    }
    Ok(entries)
}
