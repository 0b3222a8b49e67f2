//! Binary checkpoint format for parameter vectors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "MMSG"
//! version u32      format version (currently 1)
//! arch    4 x u32  input channels, base width, depth, output channels
//! count   u64      number of parameters
//! values  count x f32 little-endian
//! ```
//!
//! Write followed by read reproduces the parameter vector bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

use super::{ArchDescriptor, ParamVector};

const MAGIC: &[u8; 4] = b"MMSG";
const VERSION: u32 = 1;

/// Write a checkpoint file.
pub fn save(path: &Path, params: &ParamVector<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let arch = params.arch();
    for field in [arch.in_channels, arch.base_width, arch.depth, arch.out_channels] {
        w.write_all(&(field as u32).to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&(params.len() as u64).to_le_bytes()).map_err(io_err)?;
    for &v in params.values() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read a checkpoint file.
pub fn load(path: &Path) -> Result<ParamVector<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: not a checkpoint file (magic {:02x?})",
            path.display(),
            magic
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let mut fields = [0usize; 4];
    for f in &mut fields {
        r.read_exact(&mut u32buf).map_err(io_err)?;
        *f = u32::from_le_bytes(u32buf) as usize;
    }
    let arch = ArchDescriptor {
        in_channels: fields[0],
        base_width: fields[1],
        depth: fields[2],
        out_channels: fields[3],
    };
    arch.validate().map_err(|_| {
        Error::Data(format!("{}: invalid architecture {arch} in header", path.display()))
    })?;

    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(io_err)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    if count != arch.param_count() {
        return Err(Error::Data(format!(
            "{}: header count {count} does not match architecture ({arch}) with {} parameters",
            path.display(),
            arch.param_count()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf).map_err(io_err)?;
        values.push(f32::from_le_bytes(u32buf));
    }
    // Trailing bytes mean a corrupt or mislabelled file.
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Data(format!(
                "{}: trailing bytes after {count} parameters",
                path.display()
            )))
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    ParamVector::from_values(arch, values)
}

/// Read a checkpoint and insist on a specific architecture.
pub fn load_expecting(path: &Path, expected: &ArchDescriptor) -> Result<ParamVector<f32>> {
    let params = load(path)?;
    if params.arch() != *expected {
        return Err(Error::ArchMismatch {
            expected: expected.to_string(),
            found: params.arch().to_string(),
        });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::build;

    fn tiny() -> ArchDescriptor {
        ArchDescriptor { in_channels: 1, base_width: 2, depth: 2, out_channels: 1 }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mmsg");
        let params = build::<f32>(tiny(), 42).unwrap();
        save(&path, &params).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.arch(), params.arch());
        for (a, b) in loaded.values().iter().zip(params.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Writing the loaded copy again produces identical bytes.
        let path2 = dir.path().join("model2.mmsg");
        save(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.mmsg");
        std::fs::write(&path, b"NOPE0000").unwrap();
        let err = load(&path).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mmsg");
        let params = build::<f32>(tiny(), 1).unwrap();
        save(&path, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn architecture_mismatch_names_both_descriptors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mmsg");
        save(&path, &build::<f32>(tiny(), 1).unwrap()).unwrap();
        let wanted = ArchDescriptor { base_width: 4, ..tiny() };
        let err = load_expecting(&path, &wanted).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("base=2") && msg.contains("base=4"), "{msg}");
    }
}
