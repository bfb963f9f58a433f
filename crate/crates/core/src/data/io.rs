//! Directory dataset format.
//!
//! ```text
//! root/manifest.txt          classes = 0,1,2 / spacing_mm = 0.4 / volume_count = N
//! root/vol_001/000_image.npy f32, shape [H, W]
//! root/vol_001/000_mask.npy  u8,  shape [H, W]
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use npyz::WriterBuilder;

use super::SampleRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub classes: BTreeSet<u8>,
    pub spacing_mm: f64,
    pub volume_count: usize,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let classes: Vec<String> = self.classes.iter().map(|c| c.to_string()).collect();
        format!(
            "classes = {}\nspacing_mm = {}\nvolume_count = {}\n",
            classes.join(","),
            self.spacing_mm,
            self.volume_count
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let (mut classes, mut spacing, mut count) = (None, None, None);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            let value = value.trim();
            match key.trim() {
                "classes" => {
                    let set = value
                        .split(',')
                        .map(|s| s.trim().parse::<u8>())
                        .collect::<Result<BTreeSet<u8>, _>>()
                        .map_err(|_| bad("classes must be a comma list of 0..=255"))?;
                    classes = Some(set);
                }
                "spacing_mm" => spacing = Some(value.parse::<f64>().map_err(|_| bad("spacing_mm must be a number"))?),
                "volume_count" => count = Some(value.parse::<usize>().map_err(|_| bad("volume_count must be an integer"))?),
                other => return Err(bad(&format!("unknown key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::format(path, format!("missing key {k}"));
        let m = DatasetManifest {
            classes: classes.ok_or_else(|| missing("classes"))?,
            spacing_mm: spacing.ok_or_else(|| missing("spacing_mm"))?,
            volume_count: count.ok_or_else(|| missing("volume_count"))?,
        };
        if !(m.spacing_mm > 0.0 && m.spacing_mm.is_finite()) {
            return Err(Error::format(path, "spacing_mm must be positive"));
        }
        if !m.classes.contains(&0) {
            return Err(Error::format(path, "classes must include background 0"));
        }
        Ok(m)
    }
}

fn write_npy<T: npyz::AutoSerialize + Copy>(path: &Path, shape: [u64; 2], data: &[T]) -> Result<()> {
    let file = BufWriter::new(fs::File::create(path)?);
    let mut w = npyz::WriteOptions::new().default_dtype().shape(&shape).writer(file).begin_nd()?;
    w.extend(data.iter().copied())?;
    w.finish()?;
    Ok(())
}

fn read_npy<T: npyz::Deserialize>(path: &Path) -> Result<(Vec<u64>, Vec<T>)> {
    let file = BufReader::new(fs::File::open(path)?);
    let npy = npyz::NpyFile::new(file).map_err(|e| Error::format(path, e.to_string()))?;
    let shape = npy.shape().to_vec();
    let data = npy.into_vec::<T>().map_err(|e| Error::format(path, e.to_string()))?;
    Ok((shape, data))
}

/// Write records grouped by volume. Existing files are overwritten.
pub fn save_dataset(root: &Path, records: &[SampleRecord], manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(root)?;
    for r in records {
        r.validate(&manifest.classes)?;
        let dir = root.join(format!("vol_{:03}", r.volume_id));
        fs::create_dir_all(&dir)?;
        let shape = [r.height as u64, r.width as u64];
        write_npy(&dir.join(format!("{:03}_image.npy", r.slice_index)), shape, &r.image)?;
        write_npy(&dir.join(format!("{:03}_mask.npy", r.slice_index)), shape, &r.mask)?;
    }
    fs::write(root.join("manifest.txt"), manifest.to_text())?;
    Ok(())
}

/// Read every `vol_*` directory under `root`, ordered by (volume, slice).
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<SampleRecord>)> {
    let manifest_path = root.join("manifest.txt");
    if !manifest_path.exists() {
        return Err(Error::Missing(format!("{}", manifest_path.display())));
    }
    let manifest = DatasetManifest::parse(&fs::read_to_string(&manifest_path)?, &manifest_path)?;
    let mut records = Vec::new();
    let mut volumes = BTreeSet::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(id) = name.strip_prefix("vol_") else { continue };
        let volume_id: u32 = id
            .parse()
            .map_err(|_| Error::format(entry.path(), "volume directory must be vol_<number>"))?;
        volumes.insert(volume_id);
        for file in fs::read_dir(entry.path())? {
            let path = file?.path();
            let fname = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let Some(slice) = fname.strip_suffix("_image.npy") else { continue };
            let slice_index: u32 = slice
                .parse()
                .map_err(|_| Error::format(&path, "slice file must be <number>_image.npy"))?;
            let mask_path = path.with_file_name(format!("{slice}_mask.npy"));
            if !mask_path.exists() {
                return Err(Error::Missing(format!("{}", mask_path.display())));
            }
            let (ishape, image) = read_npy::<f32>(&path)?;
            let (mshape, mask) = read_npy::<u8>(&mask_path)?;
            if ishape.len() != 2 || ishape != mshape {
                return Err(Error::format(&mask_path, "image and mask must share a 2D shape"));
            }
            let rec = SampleRecord::new(ishape[0] as usize, ishape[1] as usize, image, mask, volume_id, slice_index)?;
            rec.validate(&manifest.classes)
                .map_err(|e| Error::format(&mask_path, e.to_string()))?;
            records.push(rec);
        }
    }
    if volumes.len() != manifest.volume_count {
        return Err(Error::format(
            &manifest_path,
            format!("volume_count is {} but {} volume directories exist", manifest.volume_count, volumes.len()),
        ));
    }
    records.sort_by_key(|r| r.key());
    Ok((manifest, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};

    #[test]
    fn round_trip_is_exact() {
        let recs = synth_dataset(&SynthSpec {
            seed: 3,
            n_volumes: 4,
            slices_per_volume: 3,
            image_size: 32,
        })
        .unwrap();
        let manifest = DatasetManifest {
            classes: BTreeSet::from([0, 1, 2]),
            spacing_mm: 0.4,
            volume_count: 4,
        };
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &recs, &manifest).unwrap();
        let (m, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(back, recs);
    }

    #[test]
    fn manifest_errors_are_reported() {
        let p = Path::new("m.txt");
        assert!(DatasetManifest::parse("classes = 0,1\nspacing_mm = 0.4\n", p).is_err());
        assert!(DatasetManifest::parse("classes = 1,2\nspacing_mm = 0.4\nvolume_count = 1", p).is_err());
        assert!(DatasetManifest::parse("classes = 0,1\nspacing_mm = -1\nvolume_count = 1", p).is_err());
        assert!(DatasetManifest::parse("colour = red", p).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Missing(_))));
    }
}
