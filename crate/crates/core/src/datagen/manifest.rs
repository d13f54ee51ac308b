//! Line-delimited dataset manifest. Images are stored next to the manifest
//! as lossless PNG files referenced by relative path.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{SceneObject, SceneRecord, Sentence};
use crate::image_ops::{load_png, save_png};
use crate::{Error, Result};

pub const MANIFEST_VERSION: &str = "glit-toy/1";
pub(crate) const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RecordRow {
    pub version: String,
    pub id: String,
    pub image_path: String,
    pub caption: String,
    pub sentences: Vec<Sentence>,
    pub objects: Vec<SceneObject>,
}

pub(crate) fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Store the record's image under the manifest directory and return the
/// row describing it.
pub(crate) fn save_record(record: &SceneRecord, base: &Path, version: &str) -> Result<RecordRow> {
    let row = row_for(record, version);
    save_png(&record.image, &base.join(&row.image_path))?;
    Ok(row)
}

/// Row for a record whose image already lives at the conventional path.
pub(crate) fn row_for(record: &SceneRecord, version: &str) -> RecordRow {
    RecordRow {
        version: version.to_string(),
        id: record.id.clone(),
        image_path: format!("{IMAGE_DIR}/{}.png", record.id),
        caption: record.caption.clone(),
        sentences: record.sentences.clone(),
        objects: record.objects.clone(),
    }
}

pub(crate) fn load_record(row: RecordRow, base: &Path) -> Result<SceneRecord> {
    let image = load_png(&base.join(&row.image_path))?;
    Ok(SceneRecord {
        id: row.id,
        image,
        caption: row.caption,
        sentences: row.sentences,
        objects: row.objects,
    })
}

pub(crate) fn write_lines<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::malformed("manifest row", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parse every non-empty line, checking the `version` field before the
/// rest of the row.
pub(crate) fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path, version: &str) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(format!("{}:{}", path.display(), lineno + 1), e))?;
        let found = value.get("version").and_then(|v| v.as_str()).unwrap_or("");
        if found != version {
            return Err(Error::Version {
                expected: version.to_string(),
                found: found.to_string(),
            });
        }
        out.push(
            serde_json::from_value(value)
                .map_err(|e| Error::malformed(format!("{}:{}", path.display(), lineno + 1), e))?,
        );
    }
    Ok(out)
}

/// Write `records` to the manifest file at `path`, with images under
/// `<dir>/images/`.
pub fn write_manifest(records: &[SceneRecord], path: &Path) -> Result<()> {
    let base = base_dir(path);
    let img_dir = base.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let rows = records
        .iter()
        .map(|r| save_record(r, &base, MANIFEST_VERSION))
        .collect::<Result<Vec<_>>>()?;
    write_lines(&rows, path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<SceneRecord>> {
    let base = base_dir(path);
    read_lines::<RecordRow>(path, MANIFEST_VERSION)?
        .into_iter()
        .map(|row| load_record(row, &base))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DatasetSpec};

    #[test]
    fn roundtrip_ten_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let records = generate_dataset(&DatasetSpec {
            n_records: 10,
            seed: 1,
            ..DatasetSpec::default()
        })
        .unwrap();
        write_manifest(&records, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), records);
    }

    #[test]
    fn missing_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_manifest(&dir.path().join("nope.jsonl")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(
            &path,
            r#"{"version":"glit-toy/9","id":"a","image_path":"x.png","caption":"c","sentences":[],"objects":[]}"#,
        )
        .unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Version { .. })));
    }

    #[test]
    fn malformed_line_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Malformed { .. })));
    }
}
