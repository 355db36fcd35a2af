//! Instance and tour serialization.
//!
//! Two instance formats are supported:
//!
//! * JSONL: one object per line with fields `id`, `n`, `coords` (array of
//!   `[x, y]` doubles), and optional `opt_cost`.
//! * A TSPLIB subset: `NAME`, `TYPE`, `DIMENSION`, `EDGE_WEIGHT_TYPE`
//!   (`EUC_2D` only), `NODE_COORD_SECTION`, `EOF`, with 1-based node ids.
//!
//! Tours travel as JSONL records `{ "id", "order", "cost" }` with 0-based
//! city indices in visiting order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Instance, Tour};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceFormat {
    TsplibEuc2d,
    Jsonl,
}

#[derive(Serialize, Deserialize)]
struct InstanceJson {
    id: String,
    n: usize,
    coords: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    opt_cost: Option<f64>,
}

/// One improvement result (or externally supplied starting tour).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TourRecord {
    pub id: String,
    pub order: Vec<usize>,
    pub cost: f64,
}

/// Parse a single instance from text in the given format.
///
/// For JSONL input the first non-empty line is read.
pub fn parse_instance(text: &str, format: InstanceFormat) -> Result<Instance> {
    match format {
        InstanceFormat::TsplibEuc2d => parse_tsplib(text),
        InstanceFormat::Jsonl => {
            for (idx, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                return instance_from_json_line(line, idx + 1);
            }
            Err(Error::Parse { line: 1, msg: "empty JSONL input".into() })
        }
    }
}

fn instance_from_json_line(line: &str, line_no: usize) -> Result<Instance> {
    let parsed: InstanceJson = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        msg: format!("bad instance object: {e}"),
    })?;
    if parsed.n != parsed.coords.len() {
        return Err(Error::Parse {
            line: line_no,
            msg: format!(
                "field n = {} disagrees with {} coordinate pairs",
                parsed.n,
                parsed.coords.len()
            ),
        });
    }
    let inst = Instance::new(parsed.id, parsed.coords)
        .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
    Ok(match parsed.opt_cost {
        Some(c) => inst.with_opt_cost(c),
        None => inst,
    })
}

fn parse_tsplib(text: &str) -> Result<Instance> {
    let mut name = String::from("tsplib");
    let mut dimension: Option<usize> = None;
    let mut weight_type: Option<String> = None;
    let mut coords: Vec<Option<[f64; 2]>> = Vec::new();
    let mut in_coords = false;
    let mut seen_coords = 0usize;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.eq_ignore_ascii_case("EOF") {
            break;
        }
        if in_coords {
            let mut parts = line.split_whitespace();
            let id: usize = parts
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("bad node id in coordinate line `{line}`"),
                })?;
            let x: f64 = parts
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("bad x coordinate in `{line}`"),
                })?;
            let y: f64 = parts
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("bad y coordinate in `{line}`"),
                })?;
            let n = coords.len();
            if id < 1 || id > n {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("node id {id} outside 1..={n}"),
                });
            }
            if coords[id - 1].is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate node id {id}"),
                });
            }
            coords[id - 1] = Some([x, y]);
            seen_coords += 1;
            continue;
        }
        let (key, value) = match line.split_once(':') {
            Some((k, v)) => (k.trim().to_ascii_uppercase(), v.trim().to_string()),
            None => (line.to_ascii_uppercase(), String::new()),
        };
        match key.as_str() {
            "NAME" => name = value,
            "DIMENSION" => {
                let n: usize = value.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad DIMENSION value `{value}`"),
                })?;
                dimension = Some(n);
            }
            "EDGE_WEIGHT_TYPE" => {
                if !value.eq_ignore_ascii_case("EUC_2D") {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("unsupported EDGE_WEIGHT_TYPE `{value}` (only EUC_2D)"),
                    });
                }
                weight_type = Some(value);
            }
            "NODE_COORD_SECTION" => {
                let n = dimension.ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: "NODE_COORD_SECTION before DIMENSION".into(),
                })?;
                coords = vec![None; n];
                in_coords = true;
            }
            // TYPE, COMMENT, and other headers carry nothing we need.
            _ => {}
        }
    }

    let _ = weight_type;
    let n = dimension.ok_or_else(|| Error::Parse {
        line: 1,
        msg: "missing DIMENSION".into(),
    })?;
    if seen_coords != n {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected {n} coordinate lines, found {seen_coords}"),
        });
    }
    let coords: Vec<[f64; 2]> = coords.into_iter().map(|c| c.unwrap()).collect();
    Instance::new(name, coords).map_err(|e| Error::Parse { line: 1, msg: e.to_string() })
}

/// One-line JSONL form of an instance, round-trip exact for coordinates.
pub fn instance_to_json_line(instance: &Instance) -> String {
    let obj = InstanceJson {
        id: instance.id().to_string(),
        n: instance.n(),
        coords: instance.coords().to_vec(),
        opt_cost: instance.opt_cost(),
    };
    serde_json::to_string(&obj).expect("instance serialization cannot fail")
}

pub fn read_instances_jsonl(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(instance_from_json_line(line, idx + 1)?);
    }
    if out.is_empty() {
        return Err(Error::Parse { line: 1, msg: "dataset contains no instances".into() });
    }
    Ok(out)
}

pub fn write_instances_jsonl(path: impl AsRef<Path>, instances: &[Instance]) -> Result<()> {
    let mut text = String::new();
    for inst in instances {
        text.push_str(&instance_to_json_line(inst));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_tours_jsonl(path: impl AsRef<Path>) -> Result<Vec<TourRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TourRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: format!("bad tour record: {e}"),
        })?;
        // Validate the permutation here so downstream code can trust records.
        Tour::new(rec.order.clone()).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: format!("tour `{}`: {e}", rec.id),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_tours_jsonl(path: impl AsRef<Path>, tours: &[TourRecord]) -> Result<()> {
    let mut text = String::new();
    for rec in tours {
        text.push_str(&serde_json::to_string(rec).expect("tour serialization cannot fail"));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
