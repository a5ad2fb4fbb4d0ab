use std::path::{Path, PathBuf};

use super::labels::{label_of, AgeLabel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub path: PathBuf,
    pub label: AgeLabel,
    pub fold: Option<u32>,
    pub gender: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub source: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records whose fold is in `folds`.
    pub fn filter_folds(&self, folds: &[u32]) -> DatasetManifest {
        DatasetManifest {
            records: self
                .records
                .iter()
                .filter(|r| r.fold.is_some_and(|f| folds.contains(&f)))
                .cloned()
                .collect(),
            source: self.source.clone(),
        }
    }
}

/// Reads a `path,label,fold,gender` CSV. Relative image paths are resolved
/// against the manifest's directory. Row numbers in errors are file lines.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(file, base).map(|records| DatasetManifest {
        records,
        source: path.to_path_buf(),
    })
}

pub fn parse_manifest(input: impl std::io::Read, base: &Path) -> Result<Vec<Record>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader.headers().map_err(|e| Error::Parse {
        row: 1,
        msg: e.to_string(),
    })?;
    let column = |name: &str| header.iter().position(|h| h == name);
    let (Some(path_col), Some(label_col)) = (column("path"), column("label")) else {
        return Err(Error::Parse {
            row: 1,
            msg: "header must name `path` and `label` columns".into(),
        });
    };
    let fold_col = column("fold");
    let gender_col = column("gender");

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.iter().all(str::is_empty) {
            continue;
        }
        let fail = |msg: String| Error::Parse { row: line, msg };
        let field = |col: Option<usize>| col.and_then(|c| row.get(c)).filter(|s| !s.is_empty());

        let raw_path = field(Some(path_col)).ok_or_else(|| fail("empty image path".into()))?;
        let label_str = field(Some(label_col)).ok_or_else(|| fail("missing label".into()))?;
        let label = label_of(label_str).map_err(|_| fail(format!("unknown age label {label_str:?}")))?;
        let fold = field(fold_col)
            .map(|f| f.parse::<u32>().map_err(|_| fail(format!("bad fold {f:?}"))))
            .transpose()?;
        let gender = field(gender_col).map(str::to_string);
        let p = Path::new(raw_path);
        records.push(Record {
            path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
            label,
            fold,
            gender,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<Record>> {
        parse_manifest(text.as_bytes(), Path::new("/data"))
    }

    #[test]
    fn three_rows() {
        let r = parse("path,label,fold,gender\nimgs/a.ppm,25-32,3,f\nb.ppm,0-2,,\n/abs/c.ppm,60-,1,m\n").unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[0].label.index(), 4);
        assert_eq!(r[0].path, Path::new("/data/imgs/a.ppm"));
        assert_eq!(r[0].fold, Some(3));
        assert_eq!(r[0].gender.as_deref(), Some("f"));
        assert_eq!(r[1].fold, None);
        assert_eq!(r[2].path, Path::new("/abs/c.ppm"));
    }

    #[test]
    fn optional_columns_and_blank_lines() {
        let r = parse("path,label\n\na.ppm,4-6\n\n\nb.ppm,8-13\n").unwrap();
        assert_eq!(r.iter().map(|r| r.label.index()).collect::<Vec<_>>(), [1, 2]);
    }

    #[test]
    fn unknown_label_names_row() {
        let err = parse("path,label,fold,gender\na.ppm,0-2,1,f\nb.ppm,21-24,1,f\n").unwrap_err();
        match err {
            Error::Parse { row, msg } => {
                assert_eq!(row, 3);
                assert!(msg.contains("21-24"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn malformed_rows() {
        assert!(matches!(parse("path,label\n,0-2\n"), Err(Error::Parse { row: 2, .. })));
        assert!(matches!(parse("path,label,fold\na,0-2,x\n"), Err(Error::Parse { row: 2, .. })));
        assert!(matches!(parse("file,label\na,0-2\n"), Err(Error::Parse { row: 1, .. })));
    }

    #[test]
    fn missing_file_is_io() {
        assert!(matches!(load_manifest("/nonexistent/m.csv"), Err(Error::Io { .. })));
    }

    #[test]
    fn fold_filter() {
        let m = DatasetManifest {
            records: parse("path,label,fold\na,0-2,0\nb,0-2,1\nc,0-2,2\nd,0-2\n").unwrap(),
            source: PathBuf::new(),
        };
        assert_eq!(m.filter_folds(&[0, 2]).len(), 2);
    }
}
