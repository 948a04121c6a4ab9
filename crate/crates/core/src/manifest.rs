//! Dataset manifests: one CSV row per image, `id,path,lat,lon,place_id,split`.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Database,
    Query,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    /// Image path, relative to the manifest's directory.
    pub path: String,
    pub lat: f64,
    pub lon: f64,
    pub place_id: Option<u64>,
    pub split: Split,
}

impl Record {
    pub fn coord(&self) -> (f64, f64) {
        (self.lat, self.lon)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub records: Vec<Record>,
}

const HEADER: [&str; 6] = ["id", "path", "lat", "lon", "place_id", "split"];

impl Manifest {
    pub fn new(name: impl Into<String>, records: Vec<Record>) -> Result<Self> {
        let m = Self {
            name: name.into(),
            records,
        };
        m.validate()?;
        Ok(m)
    }

    /// Coordinates in range, ids unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            check_coord(r.lat, r.lon)?;
            if !seen.insert(r.id) {
                return Err(format_err("manifest", format!("duplicate id {}", r.id)));
            }
        }
        Ok(())
    }

    pub fn from_reader(name: impl Into<String>, reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().ne(HEADER.iter().copied()) {
            return Err(format_err(
                "manifest",
                format!("header must be {}, got {}", HEADER.join(","), headers.iter().collect::<Vec<_>>().join(",")),
            ));
        }
        let records = rdr.deserialize().collect::<std::result::Result<Vec<Record>, _>>()?;
        Self::new(name, records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let name = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Self::from_reader(name, std::fs::File::open(path)?)
    }

    pub fn to_writer(&self, writer: impl Write) -> Result<()> {
        // serde only emits a header alongside the first row, so write it by hand
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        w.write_record(HEADER)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.to_writer(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, id: u64) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }
}

pub(crate) fn check_coord(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::Coordinate(format!("({lat}, {lon})")));
    }
    Ok(())
}
