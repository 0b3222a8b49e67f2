//! On-disk layout for benchmarks: one binary file per volume, one directory
//! per dataset, and a root `manifest.csv` listing datasets with their
//! family, modality count, and presence threshold.
//!
//! Volume file layout, integers little-endian:
//!
//! ```text
//! magic      4 bytes  "MMVL"
//! version    u32      currently 1
//! dataset-id u16 length + UTF-8 bytes
//! volume-id  u32
//! z          u16      modality count of the parent organ
//! D, H, W    u32 each
//! data       D*H*W f32 intensities, then D*H*W u8 mask bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

use super::{Dataset, Volume};

const MAGIC: &[u8; 4] = b"MMVL";
const VERSION: u32 = 1;

/// One row of `manifest.csv`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub dataset: String,
    pub family: String,
    pub z: u16,
    pub threshold: u32,
}

/// Write one volume file.
pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let id = v.dataset_id.as_bytes();
    if id.len() > u16::MAX as usize {
        return Err(Error::Data(format!("dataset id too long ({} bytes)", id.len())));
    }
    w.write_all(&(id.len() as u16).to_le_bytes()).map_err(io_err)?;
    w.write_all(id).map_err(io_err)?;
    w.write_all(&v.volume_id.to_le_bytes()).map_err(io_err)?;
    w.write_all(&v.z.to_le_bytes()).map_err(io_err)?;
    let (d, h, wd) = v.dims();
    for extent in [d, h, wd] {
        w.write_all(&(extent as u32).to_le_bytes()).map_err(io_err)?;
    }
    for &x in v.intensities() {
        w.write_all(&x.to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(v.masks()).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Read one volume file.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: not a volume file (magic {:02x?})",
            path.display(),
            magic
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut u16buf = [0u8; 2];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported volume format version {version}",
            path.display()
        )));
    }
    r.read_exact(&mut u16buf).map_err(io_err)?;
    let id_len = u16::from_le_bytes(u16buf) as usize;
    let mut id_bytes = vec![0u8; id_len];
    r.read_exact(&mut id_bytes).map_err(io_err)?;
    let dataset_id = String::from_utf8(id_bytes)
        .map_err(|_| Error::Data(format!("{}: dataset id is not UTF-8", path.display())))?;
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let volume_id = u32::from_le_bytes(u32buf);
    r.read_exact(&mut u16buf).map_err(io_err)?;
    let z = u16::from_le_bytes(u16buf);
    let mut dims = [0usize; 3];
    for dim in &mut dims {
        r.read_exact(&mut u32buf).map_err(io_err)?;
        *dim = u32::from_le_bytes(u32buf) as usize;
    }
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|x| x.checked_mul(dims[2]))
        .ok_or_else(|| Error::Data(format!("{}: absurd volume extents", path.display())))?;

    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw).map_err(io_err)?;
    let intensities: Vec<f32> =
        raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut masks = vec![0u8; n];
    r.read_exact(&mut masks).map_err(io_err)?;
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Data(format!("{}: trailing bytes after volume data", path.display())))
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    Volume::new(dataset_id, volume_id, z, (dims[0], dims[1], dims[2]), intensities, masks)
}

fn volume_file_name(volume_id: u32) -> String {
    format!("v{volume_id:04}.mmvl")
}

/// Write a dataset as a directory of volume files under `root`.
pub fn save_dataset(root: &Path, d: &Dataset) -> Result<()> {
    let dir = root.join(&d.id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut seen = std::collections::HashSet::new();
    for v in &d.volumes {
        if !seen.insert(v.volume_id) {
            return Err(Error::Data(format!(
                "dataset {}: duplicate volume id {}",
                d.id, v.volume_id
            )));
        }
        save_volume(&dir.join(volume_file_name(v.volume_id)), v)?;
    }
    Ok(())
}

/// Read a dataset directory according to its manifest row.
pub fn load_dataset(root: &Path, entry: &ManifestEntry) -> Result<Dataset> {
    let dir = root.join(&entry.dataset);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mmvl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("{}: no volume files", dir.display())));
    }
    let mut volumes = Vec::with_capacity(files.len());
    for f in files {
        let v = load_volume(&f)?;
        if v.dataset_id != entry.dataset {
            return Err(Error::Data(format!(
                "{}: file claims dataset {} but sits in {}",
                f.display(),
                v.dataset_id,
                entry.dataset
            )));
        }
        if v.z != entry.z {
            return Err(Error::Data(format!(
                "{}: volume modality count {} contradicts manifest {}",
                f.display(),
                v.z,
                entry.z
            )));
        }
        volumes.push(v);
    }
    Ok(Dataset {
        id: entry.dataset.clone(),
        family: entry.family.clone(),
        z: entry.z,
        threshold: entry.threshold,
        volumes,
    })
}

const MANIFEST_HEADER: &str = "dataset,family,z,threshold";

/// Write `manifest.csv`.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for e in entries {
        if e.dataset.contains(',') || e.family.contains(',') {
            return Err(Error::Data(format!(
                "manifest names may not contain commas: {}/{}",
                e.dataset, e.family
            )));
        }
        text.push_str(&format!("{},{},{},{}\n", e.dataset, e.family, e.z, e.threshold));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read `manifest.csv`.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == MANIFEST_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "{}: expected header '{MANIFEST_HEADER}', got {:?}",
                path.display(),
                other.unwrap_or("")
            )))
        }
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!(
                "{} line {}: expected 4 fields, got {}",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        let parse_err = |what: &str| {
            Error::Data(format!("{} line {}: bad {what} '{}'", path.display(), i + 2, line))
        };
        entries.push(ManifestEntry {
            dataset: fields[0].to_string(),
            family: fields[1].to_string(),
            z: fields[2].trim().parse().map_err(|_| parse_err("modality count"))?,
            threshold: fields[3].trim().parse().map_err(|_| parse_err("threshold"))?,
        });
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("{}: manifest lists no datasets", path.display())));
    }
    Ok(entries)
}

/// Write a full benchmark: `manifest.csv` plus one directory per dataset.
pub fn save_benchmark(root: &Path, datasets: &[Dataset]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let entries: Vec<ManifestEntry> = datasets
        .iter()
        .map(|d| ManifestEntry {
            dataset: d.id.clone(),
            family: d.family.clone(),
            z: d.z,
            threshold: d.threshold,
        })
        .collect();
    write_manifest(&root.join("manifest.csv"), &entries)?;
    for d in datasets {
        save_dataset(root, d)?;
    }
    Ok(())
}

/// Read a full benchmark back from its root directory.
pub fn load_benchmark(root: &Path) -> Result<Vec<Dataset>> {
    let entries = read_manifest(&root.join("manifest.csv"))?;
    entries.iter().map(|e| load_dataset(root, e)).collect()
}
