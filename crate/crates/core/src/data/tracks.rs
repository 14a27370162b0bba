use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TRACKS_HEADER: [&str; 9] = [
    "frame",
    "id",
    "x",
    "y",
    "xVelocity",
    "yVelocity",
    "xAcceleration",
    "yAcceleration",
    "laneId",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    pub frame: i64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    pub lane: i64,
}

impl TrackRecord {
    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    /// Acceleration projected on the direction of travel; 0 when stopped.
    pub fn tangential_acceleration(&self) -> f64 {
        (self.ax * self.vx + self.ay * self.vy) / self.speed().max(1e-6)
    }

    /// `[x, y, s, a]`.
    pub fn state(&self) -> [f64; 4] {
        [self.x, self.y, self.speed(), self.tangential_acceleration()]
    }
}

/// One vehicle's contiguous per-frame records.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrack {
    pub id: u64,
    pub records: Vec<TrackRecord>,
}

impl RawTrack {
    pub fn first_frame(&self) -> i64 {
        self.records.first().map_or(0, |r| r.frame)
    }

    pub fn at_frame(&self, frame: i64) -> Option<&TrackRecord> {
        let offset = frame.checked_sub(self.first_frame())?;
        usize::try_from(offset)
            .ok()
            .and_then(|i| self.records.get(i))
    }
}

pub fn ingest_tracks(path: &Path) -> Result<Vec<RawTrack>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_tracks(file)
}

/// Parses a tracks CSV. Columns are located by header name; rows must be
/// ordered by `(id, frame)` with contiguous frames per id.
pub fn parse_tracks(reader: impl Read) -> Result<Vec<RawTrack>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Format(format!("header: {e}")))?
        .clone();
    let mut cols = [0usize; 9];
    for (slot, name) in cols.iter_mut().zip(TRACKS_HEADER) {
        *slot = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("missing column `{name}`")))?;
    }
    let mut tracks: Vec<RawTrack> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("row {row}: {e}")))?;
        let field = |c: usize| -> Result<f64> {
            let raw = rec.get(cols[c]).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::Format(format!(
                        "row {row}: column `{}` is not numeric: {raw:?}",
                        TRACKS_HEADER[c]
                    ))
                })
        };
        let int = |c: usize| -> Result<i64> {
            let v = field(c)?;
            if v.fract() != 0.0 {
                return Err(Error::Format(format!(
                    "row {row}: column `{}` is not an integer",
                    TRACKS_HEADER[c]
                )));
            }
            Ok(v as i64)
        };
        let id = int(1)?;
        if id < 0 {
            return Err(Error::Format(format!("row {row}: negative id")));
        }
        let record = TrackRecord {
            frame: int(0)?,
            x: field(2)?,
            y: field(3)?,
            vx: field(4)?,
            vy: field(5)?,
            ax: field(6)?,
            ay: field(7)?,
            lane: int(8)?,
        };
        match tracks.last_mut() {
            Some(t) if t.id == id as u64 => {
                let prev = t.records.last().expect("tracks are never empty").frame;
                if record.frame != prev + 1 {
                    return Err(Error::Format(format!(
                        "row {row}: vehicle {id} jumps from frame {prev} to {}",
                        record.frame
                    )));
                }
                t.records.push(record);
            }
            _ => {
                if tracks.iter().any(|t| t.id == id as u64) {
                    return Err(Error::Format(format!(
                        "row {row}: rows of vehicle {id} are not grouped"
                    )));
                }
                tracks.push(RawTrack {
                    id: id as u64,
                    records: vec![record],
                });
            }
        }
    }
    Ok(tracks)
}

pub fn write_tracks(tracks: &[RawTrack], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(TRACKS_HEADER).map_err(fmt)?;
    for t in tracks {
        for r in &t.records {
            w.write_record(&[
                r.frame.to_string(),
                t.id.to_string(),
                r.x.to_string(),
                r.y.to_string(),
                r.vx.to_string(),
                r.vy.to_string(),
                r.ax.to_string(),
                r.ay.to_string(),
                r.lane.to_string(),
            ])
            .map_err(fmt)?;
        }
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}
