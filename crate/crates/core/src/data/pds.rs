//! `PDS1` binary datasets and the PNG-directory loader.
//!
//! Layout (little-endian): magic `PDS1`, u32 sample count, u16 height,
//! u16 width, u16 class count, then per sample u32 individual id, u16 label
//! and `height * width` row-major pixel bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Deserialize;

use super::Dataset;
use crate::error::{Error, Result};

pub const PDS_MAGIC: &[u8; 4] = b"PDS1";

pub fn write_pds<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let dim = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u16")))
    };
    w.write_all(PDS_MAGIC)?;
    w.write_u32::<LittleEndian>(
        u32::try_from(ds.len()).map_err(|_| Error::Format("too many samples".into()))?,
    )?;
    w.write_u16::<LittleEndian>(dim(ds.height(), "height")?)?;
    w.write_u16::<LittleEndian>(dim(ds.width(), "width")?)?;
    w.write_u16::<LittleEndian>(dim(ds.n_classes(), "class count")?)?;
    for s in ds.samples() {
        w.write_u32::<LittleEndian>(s.id.individual)?;
        w.write_u16::<LittleEndian>(s.label)?;
        w.write_all(&s.pixels)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `PDS1` stream. Sequence numbers are re-assigned in file order.
pub fn read_pds<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PDS_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected PDS1")));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let height = r.read_u16::<LittleEndian>()? as usize;
    let width = r.read_u16::<LittleEndian>()? as usize;
    let n_classes = r.read_u16::<LittleEndian>()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let individual = r.read_u32::<LittleEndian>()?;
        let label = r.read_u16::<LittleEndian>()?;
        let mut pixels = vec![0u8; height * width];
        r.read_exact(&mut pixels)?;
        records.push((individual, label, pixels));
    }
    Dataset::ingest(n_classes, height, width, records)
}

pub fn write_pds_file(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_pds(ds, BufWriter::new(File::create(path)?))
}

pub fn read_pds_file(path: impl AsRef<Path>) -> Result<Dataset> {
    read_pds(BufReader::new(File::open(path)?))
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    label: u16,
    individual_id: u32,
}

/// Loads 8-bit grayscale PNG files listed in a `path,label,individual_id` CSV
/// manifest. Relative paths resolve against the manifest's directory. When
/// `n_classes` is `None` it is inferred as the largest label plus one.
pub fn load_png_directory(manifest: impl AsRef<Path>, n_classes: Option<usize>) -> Result<Dataset> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::Reader::from_path(manifest)?;
    let mut records = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for row in reader.deserialize() {
        let row: ManifestRow = row?;
        let img = image::open(base.join(&row.path))?;
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(Error::Format(format!(
                    "{}: expected 8-bit grayscale, found {:?}",
                    row.path,
                    other.color()
                )))
            }
        };
        let d = (gray.height() as usize, gray.width() as usize);
        match dims {
            None => dims = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::DatasetMismatch(format!(
                    "{} is {}x{}, expected {}x{}",
                    row.path, d.0, d.1, expected.0, expected.1
                )))
            }
            _ => {}
        }
        records.push((row.individual_id, row.label, gray.into_raw()));
    }
    let (height, width) = dims.ok_or(Error::EmptyDataset)?;
    let n_classes = n_classes
        .unwrap_or_else(|| records.iter().map(|r| usize::from(r.1) + 1).max().unwrap_or(0));
    Dataset::ingest(n_classes, height, width, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_magic() {
        let err = read_pds(&b"PDS2\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn truncated_stream_is_an_error() {
        let ds = Dataset::ingest(2, 2, 2, [(1, 1, vec![1, 2, 3, 4])]).unwrap();
        let mut buf = Vec::new();
        write_pds(&ds, &mut buf).unwrap();
        buf.pop();
        assert!(read_pds(&buf[..]).is_err());
    }

    #[test]
    fn header_layout() {
        let ds = Dataset::ingest(30, 3, 2, [(258, 17, vec![9; 6])]).unwrap();
        let mut buf = Vec::new();
        write_pds(&ds, &mut buf).unwrap();
        assert_eq!(
            buf,
            [b'P', b'D', b'S', b'1', 1, 0, 0, 0, 3, 0, 2, 0, 30, 0, 2, 1, 0, 0, 17, 0, 9, 9, 9, 9, 9, 9]
        );
    }

    #[test]
    fn png_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = String::from("path,label,individual_id\n");
        for (i, (label, id)) in [(0u16, 5u32), (2, 5), (1, 6)].into_iter().enumerate() {
            let px: Vec<u8> = (0..12).map(|p| (p * 20 + i) as u8).collect();
            let img = image::GrayImage::from_raw(4, 3, px).unwrap();
            let name = format!("img{i}.png");
            img.save(dir.path().join(&name)).unwrap();
            manifest.push_str(&format!("{name},{label},{id}\n"));
        }
        let mpath = dir.path().join("manifest.csv");
        std::fs::write(&mpath, manifest).unwrap();
        let ds = load_png_directory(&mpath, None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dims(), (3, 4));
        assert_eq!(ds.n_classes(), 3);
        assert_eq!(ds.get(2).pixels[5], 102);
        assert_eq!(ds.individuals(), vec![5, 6]);
    }
}
