//! `.apal` indexed-image files and the storage budget calculator.

mod budget;

pub use budget::{budget, budget_with_overhead, BudgetReport};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::quantize::{QuantMode, QuantizedImage, MAX_COLORS};

pub const MAGIC: &[u8; 4] = b"APAL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;

/// Bits per stored index: `ceil(log2 K)`, at least 1.
pub fn bits_per_index(k: usize) -> u32 {
    if k <= 2 {
        1
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

/// Exact file size for the given geometry.
pub fn packed_size(mode: QuantMode, channels: usize, height: usize, width: usize, k: usize) -> usize {
    let planes = match mode {
        QuantMode::Joint => 1,
        QuantMode::PerChannel => channels,
    };
    let plane_bytes = (height * width * bits_per_index(k) as usize).div_ceil(8);
    HEADER_LEN + channels * k + planes * plane_bytes
}

fn fits_u16(name: &str, v: usize) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Parameter(format!("{name}={v} does not fit the header")))
}

pub fn pack(q: &QuantizedImage) -> Result<Vec<u8>> {
    if q.k == 0 || q.k > MAX_COLORS {
        return Err(Error::Parameter(format!("K must be in 1..=256, got {}", q.k)));
    }
    let channels = u8::try_from(q.channels)
        .map_err(|_| Error::Parameter(format!("{} channels do not fit the header", q.channels)))?;
    let bits = bits_per_index(q.k);
    let mut out = Vec::with_capacity(packed_size(q.mode, q.channels, q.height, q.width, q.k));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(q.mode.code());
    out.push(channels);
    out.extend_from_slice(&fits_u16("K", q.k)?.to_le_bytes());
    out.extend_from_slice(&fits_u16("H", q.height)?.to_le_bytes());
    out.extend_from_slice(&fits_u16("W", q.width)?.to_le_bytes());
    out.push(bits as u8);
    out.extend_from_slice(&q.palette);
    for plane in q.indices.chunks(q.pixels().max(1)).take(q.planes()) {
        let mut acc = 0u32;
        let mut filled = 0u32;
        for &idx in plane {
            acc = acc << bits | idx as u32;
            filled += bits;
            while filled >= 8 {
                filled -= 8;
                out.push((acc >> filled) as u8);
            }
            acc &= (1 << filled) - 1;
        }
        if filled > 0 {
            out.push((acc << (8 - filled)) as u8);
        }
    }
    Ok(out)
}

pub fn unpack(bytes: &[u8]) -> Result<QuantizedImage> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic (expected APAL)"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(4, format!("unsupported version {}", bytes[4])));
    }
    let mode = QuantMode::from_code(bytes[5]).ok_or_else(|| Error::format(5, format!("unknown mode {}", bytes[5])))?;
    let channels = bytes[6] as usize;
    if channels == 0 {
        return Err(Error::format(6, "zero channels"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
    let k = u16_at(7);
    if k == 0 || k > MAX_COLORS {
        return Err(Error::format(7, format!("K={k} outside 1..=256")));
    }
    let (height, width) = (u16_at(9), u16_at(11));
    let bits = bytes[13] as u32;
    if bits != bits_per_index(k) {
        return Err(Error::format(13, format!("bits per index {bits} inconsistent with K={k}")));
    }
    let expected = packed_size(mode, channels, height, width, k);
    if bytes.len() < expected {
        return Err(Error::format(bytes.len(), format!("truncated body, expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(Error::format(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let palette = bytes[HEADER_LEN..HEADER_LEN + channels * k].to_vec();
    let p = height * width;
    let plane_bytes = (p * bits as usize).div_ceil(8);
    let planes = match mode {
        QuantMode::Joint => 1,
        QuantMode::PerChannel => channels,
    };
    let mut indices = Vec::with_capacity(planes * p);
    let mask = (1u32 << bits) - 1;
    for plane in 0..planes {
        let start = HEADER_LEN + channels * k + plane * plane_bytes;
        let data = &bytes[start..start + plane_bytes];
        for i in 0..p {
            let bit = i * bits as usize;
            let (byte, shift) = (bit / 8, bit % 8);
            let window = (data[byte] as u32) << 8 | data.get(byte + 1).copied().unwrap_or(0) as u32;
            let idx = (window >> (16 - shift as u32 - bits)) & mask;
            if idx as usize >= k {
                return Err(Error::format(start + byte, format!("index {idx} is not below K={k}")));
            }
            indices.push(idx as u8);
        }
        let used = p * bits as usize;
        if used % 8 != 0 && data[plane_bytes - 1] & (0xff >> (used % 8)) != 0 {
            return Err(Error::format(start + plane_bytes - 1, "nonzero padding bits"));
        }
    }
    QuantizedImage::new(mode, channels, height, width, k, palette, indices)
}

pub fn write_apal(q: &QuantizedImage, path: &Path) -> Result<()> {
    let bytes = pack(q)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_apal(path: &Path) -> Result<QuantizedImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    unpack(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_quantized() -> impl Strategy<Value = QuantizedImage> {
        (1usize..=4, 1usize..=9, 1usize..=9, 1usize..=256, any::<bool>(), any::<u64>()).prop_map(
            |(c, h, w, k, joint, seed)| {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mode = if joint { QuantMode::Joint } else { QuantMode::PerChannel };
                let planes = if joint { 1 } else { c };
                let palette = (0..c * k).map(|_| rng.gen()).collect();
                let indices = (0..planes * h * w).map(|_| rng.gen_range(0..k) as u8).collect();
                QuantizedImage::new(mode, c, h, w, k, palette, indices).unwrap()
            },
        )
    }

    #[test]
    fn bit_widths() {
        let expect = [(1, 1), (2, 1), (3, 2), (4, 2), (5, 3), (16, 4), (17, 5), (64, 6), (128, 7), (129, 8), (256, 8)];
        for (k, b) in expect {
            assert_eq!(bits_per_index(k), b, "K={k}");
        }
    }

    #[test]
    fn cifar_k64_per_channel_size() {
        assert_eq!(packed_size(QuantMode::PerChannel, 3, 32, 32, 64), 14 + 192 + 2304);
    }

    #[test]
    fn k256_plane_is_raw_size() {
        let q = QuantizedImage::new(QuantMode::PerChannel, 1, 4, 4, 256, (0..=255).collect(), (0..16).collect()).unwrap();
        let bytes = pack(&q).unwrap();
        assert_eq!(&bytes[HEADER_LEN + 256..], &(0..16).collect::<Vec<u8>>()[..]);
    }

    #[test]
    fn msb_first_layout() {
        // K=4 → 2 bits; indices 3,0,1,2,1 → 11 00 01 10 | 01 000000
        let q = QuantizedImage::new(QuantMode::PerChannel, 1, 1, 5, 4, vec![0, 1, 2, 3], vec![3, 0, 1, 2, 1]).unwrap();
        let bytes = pack(&q).unwrap();
        assert_eq!(&bytes[..HEADER_LEN], b"APAL\x01\x01\x01\x04\x00\x01\x00\x05\x00\x02");
        assert_eq!(&bytes[HEADER_LEN + 4..], &[0b1100_0110, 0b0100_0000]);
    }

    #[test]
    fn rejects_corruption() {
        let q = QuantizedImage::new(QuantMode::PerChannel, 1, 1, 3, 3, vec![0, 1, 2], vec![0, 1, 2]).unwrap();
        let good = pack(&q).unwrap();
        let offset = |b: &[u8]| match unpack(b) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(offset(&bad), 0);
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(offset(&bad), 4);
        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(offset(&bad), good.len());
        // 2-bit index 3 ≥ K=3 in the first packed byte.
        let mut bad = good.clone();
        bad[HEADER_LEN + 3] = 0b1100_0000;
        assert_eq!(offset(&bad), HEADER_LEN + 3);
        let mut bad = good.clone();
        bad[HEADER_LEN + 3] |= 1;
        assert_eq!(offset(&bad), HEADER_LEN + 3);
        assert!(unpack(&good[..good.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_and_size(q in arb_quantized()) {
            let bytes = pack(&q).unwrap();
            prop_assert_eq!(bytes.len(), packed_size(q.mode, q.channels, q.height, q.width, q.k));
            let back = unpack(&bytes).unwrap();
            prop_assert_eq!(back.reconstruct(), q.reconstruct());
            prop_assert_eq!(&back, &q);
            prop_assert_eq!(pack(&back).unwrap(), bytes);
        }
    }
}
