use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use super::{DatasetError, IdMaps, InteractionDataset};

type Record = (u64, u64, Option<i64>);

/// Parses `user<TAB>item[<TAB>timestamp]` lines. A trailing `source=<tag>`
/// column is accepted and ignored so generated-interaction files load too.
pub fn parse_interactions<R: BufRead>(
    reader: R,
    source_name: &str,
) -> Result<Vec<Record>, DatasetError> {
    let mut records = Vec::new();
    let mut timed: Option<bool> = None;
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line.map_err(|e| DatasetError::Io {
            path: source_name.to_string(),
            source: e,
        })?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let malformed = |message: String| DatasetError::Malformed {
            source_name: source_name.to_string(),
            line: line_no,
            message,
        };
        let mut fields: Vec<&str> = line.split('\t').collect();
        if fields.last().is_some_and(|f| f.starts_with("source=")) {
            fields.pop();
        }
        if !(2..=3).contains(&fields.len()) {
            return Err(malformed(format!(
                "expected 2 or 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let user: u64 = fields[0]
            .parse()
            .map_err(|_| malformed(format!("user field {:?} is not an integer", fields[0])))?;
        let item: u64 = fields[1]
            .parse()
            .map_err(|_| malformed(format!("item field {:?} is not an integer", fields[1])))?;
        let ts = match fields.get(2) {
            Some(f) => Some(
                f.parse::<i64>()
                    .map_err(|_| malformed(format!("timestamp field {f:?} is not an integer")))?,
            ),
            None => None,
        };
        match timed {
            None => timed = Some(ts.is_some()),
            Some(t) if t != ts.is_some() => {
                return Err(malformed(
                    "timestamp column present on some lines only".into(),
                ))
            }
            _ => {}
        }
        records.push((user, item, ts));
    }
    if records.is_empty() {
        return Err(DatasetError::Empty(source_name.to_string()));
    }
    Ok(records)
}

fn open(path: &Path) -> Result<BufReader<File>, DatasetError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })
}

/// Loads a TSV interaction file, assigning dense indices in first-seen order.
pub fn load_interactions(path: &Path) -> Result<InteractionDataset, DatasetError> {
    let records = parse_interactions(open(path)?, &path.display().to_string())?;
    Ok(InteractionDataset::from_records(records))
}

/// Loads a TSV file against existing id maps (e.g. a split written by
/// [`write_tsv`] from a dataset sharing those maps).
pub fn load_interactions_with_ids(
    path: &Path,
    ids: Arc<IdMaps>,
) -> Result<InteractionDataset, DatasetError> {
    let records = parse_interactions(open(path)?, &path.display().to_string())?;
    InteractionDataset::from_records_with_ids(ids, records)
}

/// Writes the dataset as TSV with external ids, in user index then stored
/// order. Timestamps are written when every interaction carries one.
pub fn write_tsv(ds: &InteractionDataset, path: &Path) -> Result<(), DatasetError> {
    let io_err = |e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    let timed = ds.has_timestamps();
    for (u, list) in ds.user_lists().iter().enumerate() {
        let ext_u = ds.external_user(u);
        for it in list {
            let ext_i = ds.external_item(it.item);
            match it.timestamp {
                Some(ts) if timed => writeln!(out, "{ext_u}\t{ext_i}\t{ts}"),
                _ => writeln!(out, "{ext_u}\t{ext_i}"),
            }
            .map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(text: &str) -> Result<InteractionDataset, DatasetError> {
        parse_interactions(Cursor::new(text), "mem").map(InteractionDataset::from_records)
    }

    #[test]
    fn three_lines_two_users_two_items() {
        let ds = parse("7\t3\n7\t9\n8\t3\n").unwrap();
        assert_eq!(ds.num_users(), 2);
        assert_eq!(ds.num_items(), 2);
        assert_eq!(ds.num_interactions(), 3);
    }

    #[test]
    fn repeated_line_collapses() {
        let ds = parse("1\t2\n1\t2\n").unwrap();
        assert_eq!(ds.num_interactions(), 1);
    }

    #[test]
    fn non_integer_names_line_one() {
        let err = parse("a b\n").unwrap_err();
        match err {
            DatasetError::Malformed { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse("1\t2\nx\t3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(parse(""), Err(DatasetError::Empty(_))));
    }

    #[test]
    fn mixed_timestamp_columns_rejected() {
        assert!(parse("1\t2\t5\n1\t3\n").is_err());
    }

    #[test]
    fn source_tag_is_ignored() {
        let ds = parse("1\t2\t5\tsource=llm\n1\t3\t6\tsource=llm\n").unwrap();
        assert_eq!(ds.num_interactions(), 2);
        assert!(ds.has_timestamps());
    }

    #[test]
    fn write_then_load_roundtrip() {
        let ds = parse("5\t50\t3\n5\t51\t1\n6\t50\t2\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tsv");
        write_tsv(&ds, &path).unwrap();
        let back = load_interactions_with_ids(&path, Arc::clone(ds.ids())).unwrap();
        assert_eq!(back, ds);
    }
}
