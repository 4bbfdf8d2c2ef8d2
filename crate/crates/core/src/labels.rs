//! Reference and predicted events on the label-frame grid, and the label CSV
//! format `frame,class,azimuth_deg,elevation_deg` (one row per active track).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SeldError};

/// One active event in one label frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventFrame {
    pub frame: usize,
    pub class: usize,
    /// Unit direction of arrival.
    pub doa: [f64; 3],
}

pub fn azel_to_vec(az_deg: f64, el_deg: f64) -> Result<[f64; 3]> {
    if !(-90.0..=90.0).contains(&el_deg) || !az_deg.is_finite() {
        return Err(SeldError::data(format!("invalid direction az={az_deg} el={el_deg}")));
    }
    let (az, el) = (az_deg.to_radians(), el_deg.to_radians());
    Ok([az.cos() * el.cos(), az.sin() * el.cos(), el.sin()])
}

/// `(azimuth in [-180, 180), elevation in [-90, 90])` in degrees.
pub fn vec_to_azel(v: [f64; 3]) -> (f64, f64) {
    let n = norm(v).max(f64::MIN_POSITIVE);
    let el = (v[2] / n).clamp(-1.0, 1.0).asin().to_degrees();
    let mut az = v[1].atan2(v[0]).to_degrees();
    if az >= 180.0 {
        az -= 360.0;
    }
    (az, el)
}

pub fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Angle between two directions in degrees. Inputs are normalized first.
pub fn angular_distance(u: [f64; 3], v: [f64; 3]) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu < 1e-12 || nv < 1e-12 {
        return Err(SeldError::data("angular distance of a zero vector"));
    }
    let c = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) / (nu * nv);
    Ok(c.clamp(-1.0, 1.0).acos().to_degrees())
}

/// Parses label CSV text. `origin` only labels error messages. A first line
/// starting with `frame` is treated as a header; blank lines are skipped.
pub fn parse_labels(text: &str, origin: &Path) -> Result<Vec<EventFrame>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("frame")) {
            continue;
        }
        let err = |message: String| SeldError::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", fields.len())));
        }
        let frame = fields[0].parse::<usize>().map_err(|e| err(format!("frame: {e}")))?;
        let class = fields[1].parse::<usize>().map_err(|e| err(format!("class: {e}")))?;
        let az = fields[2].parse::<f64>().map_err(|e| err(format!("azimuth: {e}")))?;
        let el = fields[3].parse::<f64>().map_err(|e| err(format!("elevation: {e}")))?;
        if !(-180.0..=180.0).contains(&az) {
            return Err(err(format!("azimuth {az} outside [-180, 180]")));
        }
        let doa = azel_to_vec(az, el).map_err(|e| err(e.to_string()))?;
        out.push(EventFrame { frame, class, doa });
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<EventFrame>> {
    let text = std::fs::read_to_string(path).map_err(|e| SeldError::io(path, e))?;
    parse_labels(&text, path)
}

/// Rows sorted by frame, then class, then direction.
pub fn format_labels(events: &[EventFrame]) -> String {
    let mut rows: Vec<(usize, usize, f64, f64)> = events
        .iter()
        .map(|e| {
            let (az, el) = vec_to_azel(e.doa);
            (e.frame, e.class, az, el)
        })
        .collect();
    rows.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
            .then(a.3.total_cmp(&b.3))
    });
    let mut s = String::from("frame,class,azimuth_deg,elevation_deg\n");
    for (f, c, az, el) in rows {
        let _ = writeln!(s, "{f},{c},{az:.4},{el:.4}");
    }
    s
}

pub fn write_labels(path: &Path, events: &[EventFrame]) -> Result<()> {
    std::fs::write(path, format_labels(events)).map_err(|e| SeldError::io(path, e))
}

/// Per-frame `(class, doa)` lists for one segment of `frames` label frames.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelClip {
    pub frames: Vec<Vec<(usize, [f64; 3])>>,
}

impl LabelClip {
    /// Events of frames `[start, start + frames)`, re-indexed from zero.
    pub fn from_events(events: &[EventFrame], start: usize, frames: usize, max_tracks: usize) -> Result<Self> {
        let mut out = vec![Vec::new(); frames];
        for e in events {
            if (start..start + frames).contains(&e.frame) {
                out[e.frame - start].push((e.class, e.doa));
            }
        }
        for (t, f) in out.iter_mut().enumerate() {
            if f.len() > max_tracks {
                return Err(SeldError::data(format!(
                    "{} simultaneous events in frame {}, at most {max_tracks} supported",
                    f.len(),
                    start + t
                )));
            }
            // Deterministic track order independent of input row order.
            f.sort_by(|a, b| {
                a.0.cmp(&b.0)
                    .then(a.1[0].total_cmp(&b.1[0]))
                    .then(a.1[1].total_cmp(&b.1[1]))
            });
        }
        Ok(Self { frames: out })
    }
}
