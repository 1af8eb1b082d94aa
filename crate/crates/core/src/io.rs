//! CSV plumbing shared by the file formats. Every format is a headered
//! comma-separated file; readers accept the file with or without its header
//! row, and paths ending in `.gz` are transparently (de)compressed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use csv::StringRecord;
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::domain::{HotelId, Itinerary, SearchCriteria};
use crate::error::{Error, Result};

/// Column names of an itinerary inside any of the formats.
pub const ITINERARY_COLUMNS: [&str; 6] =
    ["hotel_id", "checkin", "checkout", "adults", "children", "rooms"];

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn open_reader(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let reader = BufReader::new(file);
    Ok(if is_gz(path) {
        Box::new(GzDecoder::new(reader))
    } else {
        Box::new(reader)
    })
}

pub fn create_writer(path: &Path) -> Result<Box<dyn Write>> {
    let file = File::create(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let writer = BufWriter::new(file);
    Ok(if is_gz(path) {
        Box::new(GzEncoder::new(writer, Compression::default()))
    } else {
        Box::new(writer)
    })
}

/// Iterate the data rows of a CSV stream, calling `row` with each record and
/// its 1-based line number. A first row equal to `header` is skipped.
pub fn for_each_row<R: Read>(
    input: R,
    source: &str,
    header: &[&str],
    mut row: impl FnMut(&StringRecord, u64) -> Result<()>,
) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut record = StringRecord::new();
    let mut first = true;
    loop {
        let more = reader.read_record(&mut record).map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::parse(source, line, e.to_string())
        })?;
        if !more {
            return Ok(());
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if first {
            first = false;
            if record.iter().eq(header.iter().copied()) {
                continue;
            }
        }
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != header.len() {
            return Err(Error::parse(
                source,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        row(&record, line)?;
    }
}

pub fn field<T: std::str::FromStr>(
    record: &StringRecord,
    idx: usize,
    name: &str,
    source: &str,
    line: u64,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    record[idx]
        .parse()
        .map_err(|e| Error::parse(source, line, format!("bad {name} {:?}: {e}", &record[idx])))
}

pub fn date_field(
    record: &StringRecord,
    idx: usize,
    name: &str,
    source: &str,
    line: u64,
) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(&record[idx], "%Y-%m-%d")
        .map_err(|e| Error::parse(source, line, format!("bad {name} {:?}: {e}", &record[idx])))
}

/// Parse the six itinerary columns starting at `start`.
pub fn itinerary_fields(
    record: &StringRecord,
    start: usize,
    source: &str,
    line: u64,
) -> Result<Itinerary> {
    let hotel: u32 = field(record, start, "hotel_id", source, line)?;
    let checkin = date_field(record, start + 1, "checkin", source, line)?;
    let checkout = date_field(record, start + 2, "checkout", source, line)?;
    let adults = field(record, start + 3, "adults", source, line)?;
    let children = field(record, start + 4, "children", source, line)?;
    let rooms = field(record, start + 5, "rooms", source, line)?;
    let criteria = SearchCriteria::new(checkin, checkout, adults, children, rooms)
        .map_err(|e| Error::parse(source, line, e.to_string()))?;
    Ok(Itinerary::new(HotelId(hotel), criteria))
}

pub fn format_itinerary(itinerary: &Itinerary) -> String {
    let c = &itinerary.criteria;
    format!(
        "{},{},{},{},{},{}",
        itinerary.hotel.0,
        c.checkin().format("%Y-%m-%d"),
        c.checkout().format("%Y-%m-%d"),
        c.adults(),
        c.children(),
        c.rooms()
    )
}
