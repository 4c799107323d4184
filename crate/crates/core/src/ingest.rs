//! Raw trace parsing, 1 Hz resampling, micro-trip segmentation, and the
//! canonical on-disk dataset format.
//!
//! The dataset format is a single JSON header line (version, provenance,
//! body checksum) followed by a CSV body of `(trip_index, t, speed)` rows.
//! It is human-inspectable, diff-friendly, and round-trips bit-exactly.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ArtifactKind, Error, Result};
use crate::trip::{MicroTrip, SpeedTrajectory, TripStats};
use crate::util::{mean, median, sha256_hex};

/// Default rest-detection threshold for segmentation (m/s).
pub const DEFAULT_STOP_SPEED: f64 = 0.5;
/// Default minimum micro-trip duration (s).
pub const DEFAULT_MIN_DURATION: f64 = 34.0;

/// Current dataset file format version.
pub const DATASET_VERSION: u32 = 1;

/// One raw GPS speed trace: timestamps in seconds since trace start.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrace {
    pub trip_id: String,
    pub timestamps: Vec<f64>,
    pub speeds: Vec<f64>,
}

/// A collection of validated micro-trips plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    micro_trips: Vec<MicroTrip>,
    pub provenance: Vec<String>,
    pub created_at: String,
    pub config_digest: Option<String>,
}

impl Dataset {
    pub fn new(micro_trips: Vec<MicroTrip>) -> Self {
        Dataset {
            micro_trips,
            provenance: Vec::new(),
            created_at: String::new(),
            config_digest: None,
        }
    }

    pub fn trips(&self) -> &[MicroTrip] {
        &self.micro_trips
    }

    pub fn len(&self) -> usize {
        self.micro_trips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.micro_trips.is_empty()
    }

    pub fn stats(&self) -> Vec<TripStats> {
        self.micro_trips.iter().map(|t| *t.stats()).collect()
    }

    /// New dataset holding the trips at `indices` (in that order).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            micro_trips: indices.iter().map(|&i| self.micro_trips[i].clone()).collect(),
            provenance: self.provenance.clone(),
            created_at: self.created_at.clone(),
            config_digest: self.config_digest.clone(),
        }
    }
}

const TRACE_HEADER: &str = "trip_id,t,speed_mps";

/// Parses a raw trace CSV (`trip_id,t,speed_mps`). Rows are grouped by
/// trip id and sorted by timestamp; speeds are clipped at >= 0. Malformed
/// rows are rejected with their 1-based line number.
pub fn parse_trace_csv<R: BufRead>(reader: R) -> Result<Vec<RawTrace>> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((_, Err(e))) => return Err(Error::io("<trace csv>", e)),
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("missing header `{TRACE_HEADER}`"),
            })
        }
    };
    if header.trim_end() != TRACE_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{TRACE_HEADER}`, got `{header}`"),
        });
    }

    // trip_id -> rows of (t, v, line); `order` keeps ids for deterministic output
    let mut order: Vec<String> = Vec::new();
    let mut by_trip: HashMap<String, Vec<(f64, f64, usize)>> = HashMap::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<trace csv>", e))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.trim_end().split(',');
        let (id, t_str, v_str) = match (fields.next(), fields.next(), fields.next(), fields.next())
        {
            (Some(a), Some(b), Some(c), None) => (a, b, c),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "expected exactly 3 comma-separated fields".into(),
                })
            }
        };
        let t: f64 = t_str.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("non-numeric timestamp `{t_str}`"),
        })?;
        let v: f64 = v_str.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("non-numeric speed `{v_str}`"),
        })?;
        if !t.is_finite() || !v.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                msg: "non-finite field".into(),
            });
        }
        if !by_trip.contains_key(id) {
            order.push(id.to_string());
        }
        by_trip
            .entry(id.to_string())
            .or_default()
            .push((t, v.max(0.0), line_no));
    }

    order.sort();
    let mut traces = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = by_trip.remove(&id).unwrap();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in rows.windows(2) {
            if w[1].0 == w[0].0 {
                return Err(Error::Parse {
                    line: w[1].2,
                    msg: format!("duplicate timestamp {} in trip `{id}`", w[1].0),
                });
            }
        }
        traces.push(RawTrace {
            trip_id: id,
            timestamps: rows.iter().map(|r| r.0).collect(),
            speeds: rows.iter().map(|r| r.1).collect(),
        });
    }
    Ok(traces)
}

/// Linear interpolation of a raw trace onto the integer-second grid spanning
/// `[ceil(t_first), floor(t_last)]`; negative interpolants clamp to zero.
pub fn resample_1hz(raw: &RawTrace) -> Result<SpeedTrajectory> {
    if raw.timestamps.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "trace `{}` has {} points, need >= 2",
            raw.trip_id,
            raw.timestamps.len()
        )));
    }
    let t0 = raw.timestamps[0].ceil();
    let t1 = raw.timestamps[raw.timestamps.len() - 1].floor();
    let n = (t1 - t0) as i64 + 1;
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "trace `{}` spans < 2 s on the integer grid",
            raw.trip_id
        )));
    }
    let mut out = Vec::with_capacity(n as usize);
    let mut seg = 0usize; // index of the segment [t_seg, t_seg+1] containing g
    for k in 0..n {
        let g = t0 + k as f64;
        while seg + 2 < raw.timestamps.len() && raw.timestamps[seg + 1] < g {
            seg += 1;
        }
        let (ta, tb) = (raw.timestamps[seg], raw.timestamps[seg + 1]);
        let (va, vb) = (raw.speeds[seg], raw.speeds[seg + 1]);
        let v = if g == ta {
            va
        } else if g == tb {
            vb
        } else {
            va + (vb - va) * (g - ta) / (tb - ta)
        };
        out.push(v.max(0.0));
    }
    SpeedTrajectory::new(out)
}

/// Splits a trajectory into maximal runs between rest points
/// (`speed <= stop_speed`). Each emitted segment spans rest-to-rest with its
/// endpoint samples forced to exact zero; segments shorter than
/// `min_duration` seconds are discarded, as are unterminated head/tail runs.
pub fn segment_micro_trips(
    traj: &SpeedTrajectory,
    stop_speed: f64,
    min_duration: f64,
) -> Vec<MicroTrip> {
    let v = traj.samples();
    let rest: Vec<bool> = v.iter().map(|&x| x <= stop_speed).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i + 1 < v.len() {
        if rest[i] && !rest[i + 1] {
            // moving run starts after i; find the next rest sample
            if let Some(j) = (i + 1..v.len()).find(|&j| rest[j]) {
                let duration = (j - i) as f64;
                if duration >= min_duration {
                    let mut seg = v[i..=j].to_vec();
                    seg[0] = 0.0;
                    let last = seg.len() - 1;
                    seg[last] = 0.0;
                    let trip = MicroTrip::new(
                        SpeedTrajectory::new(seg).expect("segment is finite and non-negative"),
                    )
                    .expect("segment endpoints are zeroed");
                    out.push(trip);
                }
                i = j;
            } else {
                break; // trailing run never returns to rest
            }
        } else {
            i += 1;
        }
    }
    out
}

/// One row of the dataset summary (all values in the attribute's unit).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub attribute: String,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
}

/// Six-attribute summary: duration (s, min), distance (m, km),
/// average speed (m/s, km/h).
pub fn dataset_summary(ds: &Dataset) -> Result<Vec<SummaryRow>> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("dataset has no trips".into()));
    }
    let stats = ds.stats();
    let collect = |f: &dyn Fn(&TripStats) -> f64| -> Vec<f64> { stats.iter().map(f).collect() };
    let row = |name: &str, xs: Vec<f64>| SummaryRow {
        attribute: name.to_string(),
        min: xs.iter().cloned().fold(f64::INFINITY, f64::min),
        max: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean: mean(&xs),
        median: median(&xs),
    };
    let durations = collect(&|s| s.duration_s);
    let distances = collect(&|s| s.distance_m);
    let speeds = collect(&|s| s.avg_speed_mps);
    Ok(vec![
        row("duration_s", durations.clone()),
        row("duration_min", durations.iter().map(|d| d / 60.0).collect()),
        row("distance_m", distances.clone()),
        row("distance_km", distances.iter().map(|d| d / 1000.0).collect()),
        row("avg_speed_mps", speeds.clone()),
        row("avg_speed_kmh", speeds.iter().map(|v| v * 3.6).collect()),
    ])
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    version: u32,
    created_at: String,
    provenance: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
    n_trips: usize,
    body_sha256: String,
}

/// Serializes a dataset to its canonical byte form.
pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut body = String::from("trip_index,t,speed_mps\n");
    for (i, trip) in ds.trips().iter().enumerate() {
        for (t, v) in trip.speeds().iter().enumerate() {
            body.push_str(&format!("{i},{t},{v}\n"));
        }
    }
    let header = DatasetHeader {
        version: DATASET_VERSION,
        created_at: ds.created_at.clone(),
        provenance: ds.provenance.clone(),
        config_digest: ds.config_digest.clone(),
        n_trips: ds.len(),
        body_sha256: sha256_hex(body.as_bytes()),
    };
    let mut out = serde_json::to_string(&header)
        .expect("header serializes")
        .into_bytes();
    out.push(b'\n');
    out.extend_from_slice(body.as_bytes());
    out
}

/// Parses the canonical byte form, verifying version and body checksum.
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Parse {
        line: 1,
        msg: "missing dataset header line".into(),
    })?;
    let header: DatasetHeader =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("bad dataset header: {e}"),
        })?;
    if header.version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: DATASET_VERSION,
        });
    }
    let body = &bytes[newline + 1..];
    let got = sha256_hex(body);
    if got != header.body_sha256 {
        return Err(Error::ChecksumMismatch(format!(
            "dataset body: expected {}, got {got}",
            header.body_sha256
        )));
    }

    let text = std::str::from_utf8(body).map_err(|_| Error::Parse {
        line: 2,
        msg: "dataset body is not UTF-8".into(),
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "trip_index,t,speed_mps")) => {}
        _ => {
            return Err(Error::Parse {
                line: 2,
                msg: "missing dataset body header".into(),
            })
        }
    }
    let mut speeds_by_trip: Vec<Vec<f64>> = Vec::with_capacity(header.n_trips);
    for (idx, line) in lines {
        let line_no = idx + 2; // 1-based, counting the JSON header line
        let mut fields = line.split(',');
        let (i_str, t_str, v_str) =
            match (fields.next(), fields.next(), fields.next(), fields.next()) {
                (Some(a), Some(b), Some(c), None) => (a, b, c),
                _ => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "expected 3 fields".into(),
                    })
                }
            };
        let i: usize = i_str.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad trip index `{i_str}`"),
        })?;
        let t: usize = t_str.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad time index `{t_str}`"),
        })?;
        let v: f64 = v_str.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad speed `{v_str}`"),
        })?;
        if i == speeds_by_trip.len() {
            speeds_by_trip.push(Vec::new());
        } else if i + 1 != speeds_by_trip.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("trip indices must be contiguous, got {i}"),
            });
        }
        let trip = speeds_by_trip.last_mut().unwrap();
        if t != trip.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("time indices must be contiguous, got {t}"),
            });
        }
        trip.push(v);
    }
    if speeds_by_trip.len() != header.n_trips {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "header declares {} trips, body has {}",
                header.n_trips,
                speeds_by_trip.len()
            ),
        });
    }
    let mut micro_trips = Vec::with_capacity(speeds_by_trip.len());
    for speeds in speeds_by_trip {
        micro_trips.push(MicroTrip::new(SpeedTrajectory::new(speeds)?)?);
    }
    Ok(Dataset {
        micro_trips,
        provenance: header.provenance,
        created_at: header.created_at,
        config_digest: header.config_digest,
    })
}

/// Writes a dataset file (lossless, versioned, checksummed).
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = dataset_to_bytes(ds);
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads a dataset file written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.display().to_string(),
                kind: ArtifactKind::Dataset,
            }
        } else {
            Error::io(path.display().to_string(), e)
        }
    })?;
    dataset_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(s: &str) -> Result<Vec<RawTrace>> {
        parse_trace_csv(Cursor::new(s.as_bytes()))
    }

    #[test]
    fn parse_single_trip() {
        let traces = parse("trip_id,t,speed_mps\na,0,0\na,1,2\na,2,4\n").unwrap();
        assert_eq!(traces.len(), 1);
        assert_eq!(traces[0].trip_id, "a");
        assert_eq!(traces[0].timestamps, vec![0.0, 1.0, 2.0]);
        assert_eq!(traces[0].speeds, vec![0.0, 2.0, 4.0]);
    }

    #[test]
    fn parse_empty_file_with_header() {
        assert!(parse("trip_id,t,speed_mps\n").unwrap().is_empty());
    }

    #[test]
    fn parse_missing_header() {
        assert!(matches!(parse("a,0,0\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn parse_duplicate_timestamp_names_line() {
        let err = parse("trip_id,t,speed_mps\na,0,0\na,1,1\na,1,2\n").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 4);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_non_numeric_field_names_line() {
        let err = parse("trip_id,t,speed_mps\na,0,zoom\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn parse_clips_negative_speeds() {
        let traces = parse("trip_id,t,speed_mps\na,0,-3\na,1,1\n").unwrap();
        assert_eq!(traces[0].speeds[0], 0.0);
    }

    #[test]
    fn parse_sorts_rows_and_trip_ids() {
        let traces = parse("trip_id,t,speed_mps\nb,0,1\na,1,2\na,0,0\nb,1,3\n").unwrap();
        assert_eq!(traces[0].trip_id, "a");
        assert_eq!(traces[0].timestamps, vec![0.0, 1.0]);
        assert_eq!(traces[1].trip_id, "b");
    }

    #[test]
    fn resample_linear_interpolation() {
        let raw = RawTrace {
            trip_id: "a".into(),
            timestamps: vec![0.0, 2.0],
            speeds: vec![0.0, 4.0],
        };
        let t = resample_1hz(&raw).unwrap();
        assert_eq!(t.samples(), &[0.0, 2.0, 4.0]);
    }

    #[test]
    fn resample_identity_on_grid() {
        let raw = RawTrace {
            trip_id: "a".into(),
            timestamps: vec![0.0, 1.0, 2.0, 3.0],
            speeds: vec![1.0, 3.0, 2.0, 5.0],
        };
        let t = resample_1hz(&raw).unwrap();
        assert_eq!(t.samples(), &raw.speeds[..]);
    }

    #[test]
    fn resample_matches_pointwise_oracle() {
        // Irregular ~0.2 Hz trace; the oracle does an independent per-point
        // bracket search + interpolation.
        let mut rng = crate::rng::seeded_rng(3);
        use rand::Rng;
        let mut ts = vec![0.3];
        while *ts.last().unwrap() < 150.0 {
            let last = *ts.last().unwrap();
            ts.push(last + rng.random_range(2.0..8.0));
        }
        let vs: Vec<f64> = ts.iter().map(|t: &f64| (t * 0.11).sin().abs() * 20.0).collect();
        let raw = RawTrace {
            trip_id: "x".into(),
            timestamps: ts.clone(),
            speeds: vs.clone(),
        };
        let out = resample_1hz(&raw).unwrap();
        let g0 = ts[0].ceil() as i64;
        for (k, &v) in out.samples().iter().enumerate() {
            let g = (g0 + k as i64) as f64;
            let j = ts.partition_point(|&t| t <= g).min(ts.len() - 1);
            let (i, j) = if j == 0 { (0, 1) } else { (j - 1, j) };
            let expect = vs[i] + (vs[j] - vs[i]) * (g - ts[i]) / (ts[j] - ts[i]);
            assert!((v - expect.max(0.0)).abs() < 1e-12, "grid point {g}");
        }
    }

    #[test]
    fn segment_hand_oracle() {
        let t = SpeedTrajectory::new(vec![0.0, 5.0, 5.0, 0.0, 0.0, 7.0, 0.0]).unwrap();
        let trips = segment_micro_trips(&t, 0.0, 0.0);
        assert_eq!(trips.len(), 2);
        assert_eq!(trips[0].speeds(), &[0.0, 5.0, 5.0, 0.0]);
        assert_eq!(trips[1].speeds(), &[0.0, 7.0, 0.0]);
    }

    #[test]
    fn segment_all_zero_trace() {
        let t = SpeedTrajectory::new(vec![0.0; 10]).unwrap();
        assert!(segment_micro_trips(&t, 0.5, 0.0).is_empty());
    }

    #[test]
    fn segment_min_duration_filter() {
        // 10 s segment dropped at min_duration = 34
        let mut v = vec![0.0];
        v.extend(std::iter::repeat(3.0).take(9));
        v.push(0.0);
        let t = SpeedTrajectory::new(v).unwrap();
        assert_eq!(segment_micro_trips(&t, 0.5, 0.0).len(), 1);
        assert!(segment_micro_trips(&t, 0.5, 34.0).is_empty());
    }

    #[test]
    fn segment_endpoints_forced_zero() {
        let t = SpeedTrajectory::new(vec![0.4, 5.0, 0.3, 0.2, 6.0, 0.1]).unwrap();
        for trip in segment_micro_trips(&t, 0.5, 0.0) {
            let v = trip.speeds();
            assert_eq!(v[0], 0.0);
            assert_eq!(v[v.len() - 1], 0.0);
            assert!(v.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn segmentation_preserves_interior_samples() {
        let t = SpeedTrajectory::new(vec![0.0, 2.0, 9.0, 4.0, 0.0, 0.0, 1.0, 3.0, 0.0]).unwrap();
        let trips = segment_micro_trips(&t, 0.5, 0.0);
        assert_eq!(&trips[0].speeds()[1..4], &[2.0, 9.0, 4.0]);
        assert_eq!(&trips[1].speeds()[1..3], &[1.0, 3.0]);
    }

    fn tiny_dataset() -> Dataset {
        let trips = vec![
            MicroTrip::new(SpeedTrajectory::new(vec![0.0, 10.0, 10.0, 10.0, 0.0]).unwrap())
                .unwrap(),
            MicroTrip::new(SpeedTrajectory::new(vec![0.0, 0.125, 2.5, 0.0]).unwrap()).unwrap(),
        ];
        let mut ds = Dataset::new(trips);
        ds.created_at = "1970-01-01T00:00:00Z".into();
        ds.provenance = vec!["test".into()];
        ds
    }

    #[test]
    fn summary_single_trip() {
        let ds = Dataset::new(vec![MicroTrip::new(
            SpeedTrajectory::new(vec![0.0, 10.0, 10.0, 10.0, 0.0]).unwrap(),
        )
        .unwrap()]);
        let rows = dataset_summary(&ds).unwrap();
        let dur = &rows[0];
        assert_eq!(dur.attribute, "duration_s");
        assert_eq!(
            (dur.min, dur.max, dur.mean, dur.median),
            (4.0, 4.0, 4.0, 4.0)
        );
    }

    #[test]
    fn summary_two_trip_median_is_midpoint() {
        let ds = tiny_dataset();
        let rows = dataset_summary(&ds).unwrap();
        assert_eq!(rows[0].median, 3.5); // durations 4 and 3
    }

    #[test]
    fn summary_empty_dataset_errors() {
        assert!(dataset_summary(&Dataset::new(vec![])).is_err());
    }

    #[test]
    fn dataset_roundtrip_bit_exact() {
        let ds = tiny_dataset();
        let bytes = dataset_to_bytes(&ds);
        let back = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(ds, back);
        assert_eq!(bytes, dataset_to_bytes(&back));
    }

    #[test]
    fn dataset_truncated_file_is_checksum_error() {
        let bytes = dataset_to_bytes(&tiny_dataset());
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            dataset_from_bytes(cut),
            Err(Error::ChecksumMismatch(_))
        ));
    }

    #[test]
    fn dataset_unknown_version_rejected() {
        let bytes = dataset_to_bytes(&tiny_dataset());
        let text = String::from_utf8(bytes).unwrap();
        let bumped = text.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(
            dataset_from_bytes(bumped.as_bytes()),
            Err(Error::VersionMismatch {
                found: 9,
                expected: 1
            })
        ));
    }
}
