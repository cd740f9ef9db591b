use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::Interaction;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 6] = ["user_id", "item_seq", "cat_seq", "target_item", "target_cat", "label"];

/// Reads a dataset file, truncating each context to its most recent
/// `n_max` items.
pub fn parse_csv_dataset(path: impl AsRef<Path>, n_max: usize) -> Result<Vec<Interaction>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, n_max)
}

pub fn read_csv(reader: impl Read, n_max: usize) -> Result<Vec<Interaction>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        let line = rdr.position().line();
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map_or(line, |p| p.line());
                return Err(Error::Parse { line, msg: e.to_string() });
            }
        }
        let line = record.position().map_or(line, |p| p.line());
        if first {
            first = false;
            if record.iter().ne(CSV_HEADER) {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected header `{}`", CSV_HEADER.join(",")),
                });
            }
            continue;
        }
        let mut x = parse_record(&record).map_err(|msg| Error::Parse { line, msg })?;
        x.truncate(n_max);
        out.push(x);
    }
    Ok(out)
}

fn parse_record(r: &csv::StringRecord) -> std::result::Result<Interaction, String> {
    if r.len() != CSV_HEADER.len() {
        return Err(format!("expected {} fields, found {}", CSV_HEADER.len(), r.len()));
    }
    let id = |field: usize| -> std::result::Result<usize, String> {
        r[field]
            .trim()
            .parse()
            .map_err(|_| format!("{}: `{}` is not a non-negative integer", CSV_HEADER[field], &r[field]))
    };
    let seq = |field: usize| -> std::result::Result<Vec<usize>, String> {
        r[field]
            .split_whitespace()
            .map(|tok| {
                tok.parse()
                    .map_err(|_| format!("{}: `{tok}` is not a non-negative integer", CSV_HEADER[field]))
            })
            .collect()
    };
    let label = id(5)?;
    let x = Interaction {
        user_id: r[0].to_string(),
        item_ids: seq(1)?,
        category_ids: seq(2)?,
        target_item: id(3)?,
        target_category: id(4)?,
        label: u8::try_from(label).map_err(|_| format!("label must be 0 or 1, got {label}"))?,
    };
    x.validate()?;
    Ok(x)
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Writes `data` in the dataset schema (UTF-8, LF line endings).
pub fn write_csv(writer: impl Write, data: &[Interaction]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let wrap = |e: csv::Error| Error::Parse { line: 0, msg: e.to_string() };
    w.write_record(CSV_HEADER).map_err(wrap)?;
    for x in data {
        w.write_record([
            x.user_id.clone(),
            join(&x.item_ids),
            join(&x.category_ids),
            x.target_item.to_string(),
            x.target_category.to_string(),
            x.label.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::Parse { line: 0, msg: e.to_string() })
}
