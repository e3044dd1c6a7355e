//! Weight archives and 2D/3D kernel derivation from a rotated bank.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! "XDCW" | version u32 = 1 | count u32
//! per record: name_len u16 | name (UTF-8) | rank u8 | extents u32 × rank | f64 × Π extents
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::convops::KernelBank5D;
use crate::error::{CrossdError, Result};
use crate::rotparam::RotationParams;
use crate::scalar::Scalar;
use crate::spectral::{mid_slice, rotate_bank};
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: [u8; 4] = *b"XDCW";
pub const ARCHIVE_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;

pub type NamedTensor = (String, Tensor<f64>);

pub fn encode_archive(records: &[(&str, &Tensor<f64>)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for (name, _) in records {
        if !seen.insert(*name) {
            return Err(CrossdError::DuplicateName(name.to_string()));
        }
    }
    let count = u32::try_from(records.len())
        .map_err(|_| CrossdError::Config("too many records".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in records {
        let name_len = u16::try_from(name.len())
            .map_err(|_| CrossdError::Config(format!("name too long: {} bytes", name.len())))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| CrossdError::Config(format!("rank {} too large", t.rank())))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e)
                .map_err(|_| CrossdError::Config(format!("extent {e} exceeds u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        out.reserve(8 * t.len());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            CrossdError::Corrupt(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < 4 || bytes[..4] != ARCHIVE_MAGIC {
        let got = &bytes[..bytes.len().min(4)];
        return Err(CrossdError::Format(format!("bad magic {:?}", String::from_utf8_lossy(got))));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != ARCHIVE_VERSION {
        return Err(CrossdError::Version(version));
    }
    let count = r.u32("record count")?;
    let mut names = HashSet::new();
    let mut out = Vec::new();
    for i in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(r.take(name_len as usize, "name")?)
            .map_err(|_| CrossdError::Format(format!("record {i}: name is not UTF-8")))?
            .to_string();
        if !names.insert(name.clone()) {
            return Err(CrossdError::DuplicateName(name));
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| {
            CrossdError::Corrupt(format!("record {name:?}: extents overflow"))
        })?;
        let bytes_needed = n
            .checked_mul(8)
            .ok_or_else(|| CrossdError::Corrupt(format!("record {name:?}: payload overflow")))?;
        let payload = r.take(bytes_needed, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::from_values(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(CrossdError::Corrupt(format!(
            "{} trailing bytes after last record",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save_archive(path: impl AsRef<Path>, records: &[(&str, &Tensor<f64>)]) -> Result<()> {
    std::fs::write(path, encode_archive(records)?)?;
    Ok(())
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    decode_archive(&std::fs::read(path)?)
}

/// Static 2D kernels `C_out × C_in/G × K × K` for a frozen rotation.
pub fn derive_2d_kernels<T: Scalar>(bank: &KernelBank5D<T>, p: &RotationParams<T>) -> Result<Tensor<T>> {
    mid_slice(derive_3d_kernels(bank, p)?.weights())
}

/// The rotated bank as a genuine 3D kernel, keeping groups and bias.
pub fn derive_3d_kernels<T: Scalar>(
    bank: &KernelBank5D<T>,
    p: &RotationParams<T>,
) -> Result<KernelBank5D<T>> {
    bank.with_weights(rotate_bank(bank, p)?.weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_archive_is_header_only() {
        let bytes = encode_archive(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"XDCW");
        assert_eq!(bytes[4..8], [1, 0, 0, 0]);
        assert_eq!(bytes[8..12], [0, 0, 0, 0]);
        assert!(decode_archive(&bytes).unwrap().is_empty());
    }

    #[test]
    fn record_layout() {
        let t = Tensor::from_values(&[2], vec![1.0, -2.0]).unwrap();
        let bytes = encode_archive(&[("ab", &t)]).unwrap();
        assert_eq!(bytes.len(), 12 + 2 + 2 + 1 + 4 + 16);
        assert_eq!(bytes[12..14], [2, 0]);
        assert_eq!(&bytes[14..16], b"ab");
        assert_eq!(bytes[16], 1);
        assert_eq!(bytes[17..21], [2, 0, 0, 0]);
        assert_eq!(bytes[21..29], 1.0f64.to_le_bytes());
    }

    #[test]
    fn file_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::from_fn(&[2, 3, 1, 2, 2], |i| i.iter().sum::<usize>() as f64 * 0.1).unwrap();
        let b = Tensor::from_values(&[1], vec![f64::MIN_POSITIVE]).unwrap();
        let path = dir.path().join("w.xdcw");
        save_archive(&path, &[("bank", &a), ("bias", &b)]).unwrap();
        let first = std::fs::read(&path).unwrap();
        save_archive(&path, &[("bank", &a), ("bias", &b)]).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
        let back = load_archive(&path).unwrap();
        assert_eq!(back, vec![("bank".to_string(), a), ("bias".to_string(), b)]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::<f64>::zeros(&[1]).unwrap();
        assert!(matches!(encode_archive(&[("w", &t), ("w", &t)]), Err(CrossdError::DuplicateName(_))));
    }

    #[test]
    fn corrupt_inputs() {
        let t = Tensor::<f64>::ones(&[3, 2]).unwrap();
        let good = encode_archive(&[("w", &t)]).unwrap();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_archive(&bad), Err(CrossdError::Format(_))));

        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode_archive(&v2), Err(CrossdError::Version(2))));

        for cut in [5, 12, 15, good.len() - 1] {
            assert!(matches!(decode_archive(&good[..cut]), Err(CrossdError::Corrupt(_))), "{cut}");
        }
        assert!(matches!(decode_archive(b"XD"), Err(CrossdError::Format(_))));

        let mut long = good;
        long.push(0);
        assert!(matches!(decode_archive(&long), Err(CrossdError::Corrupt(_))));
    }

    #[test]
    fn zero_angle_export_is_roll() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = KernelBank5D::<f64>::random(2, 3, 5, 1, &mut rng).unwrap();
        let p = RotationParams::identity();
        let rolled = bank.weights().roll(&[0, 0, 1, 1, 1]).unwrap();
        let d3 = derive_3d_kernels(&bank, &p).unwrap();
        assert!(d3.weights().max_abs_diff(&rolled).unwrap() <= 1e-10);
        let d2 = derive_2d_kernels(&bank, &p).unwrap();
        assert!(d2.max_abs_diff(&rolled.slice_axis(2, 2).unwrap()).unwrap() <= 1e-10);
    }

    #[test]
    fn unit_kernel_derivation_is_reshape() {
        let w = Tensor::from_values(&[2, 1, 1, 1, 1], vec![0.5, -3.0]).unwrap();
        let bank = KernelBank5D::new(w.clone(), 1).unwrap();
        let p = RotationParams::from_axis_angle([1.0, 2.0, 0.5], 0.6).unwrap();
        let d2 = derive_2d_kernels(&bank, &p).unwrap();
        assert!(d2.max_abs_diff(&w.reshape(&[2, 1, 1, 1]).unwrap()).unwrap() <= 1e-15);
    }

    #[test]
    fn rotated_export_keeps_energy_and_shares_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let bank = KernelBank5D::<f64>::random(3, 2, 3, 1, &mut rng).unwrap();
            let axis = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0];
            let p = RotationParams::from_axis_angle(axis, rng.gen_range(-0.7..0.7)).unwrap();
            let d3 = derive_3d_kernels(&bank, &p).unwrap();
            let ratio = d3.weights().l2_norm() / bank.weights().l2_norm();
            assert!((ratio - 1.0).abs() <= 1e-6);
            assert_eq!(derive_2d_kernels(&bank, &p).unwrap(), mid_slice(d3.weights()).unwrap());
        }
    }

    proptest! {
        #[test]
        fn round_trip_any_rank(rank in 1usize..=5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..4)).collect();
            let t = Tensor::from_fn(&shape, |_| f64::from_bits(rng.gen::<u64>() & !(0x7ffu64 << 52) | (0x3ffu64 << 52))).unwrap();
            let bytes = encode_archive(&[("t", &t)]).unwrap();
            let back = decode_archive(&bytes).unwrap();
            prop_assert_eq!(back.len(), 1);
            let same = back[0].1.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
            prop_assert_eq!(back[0].1.shape(), t.shape());
        }
    }
}
