//! JSON container for warp parameters.
//!
//! ```text
//! {"model": "edffd"|"bspline"|"tps"|"homography", "grid": [M, N], "theta": t,
//!  "H": [9 reals, row-major], "displacements": [dx, dy, ...], "canvas": [W, H],
//!  "stages": [{"grid": [M, N], "displacements": [...]}, ...]}
//! ```
//!
//! `grid`, `displacements` and `theta` may be omitted for `homography`.
//! `stages` is optional and lists refinement grids after the first. A head
//! container uses `"model": "asma"` with a `"head"` object instead.

use std::path::Path;

use serde_json::{json, Map, Value};

use crate::aggregator::AsmaHead;
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Mask};
use crate::warp::{
    compose_sampling_map_with, warp_image, Composition, ControlGrid, DeformationModel, DisplacementField, Homography,
    SamplingMap,
};

/// Homography plus zero or more refinement grids on one canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpParams {
    /// `None` for a homography-only warp.
    pub model: Option<DeformationModel>,
    pub theta: f64,
    pub homography: Homography,
    pub grids: Vec<ControlGrid>,
    pub canvas: (usize, usize),
    pub composition: Composition,
}

impl WarpParams {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            model: None,
            theta: 0.75,
            homography: Homography::identity(),
            grids: Vec::new(),
            canvas: (width, height),
            composition: Composition::Additive,
        }
    }

    pub fn fields(&self) -> Result<Vec<DisplacementField>> {
        match self.model {
            None => Ok(Vec::new()),
            Some(model) => self.grids.iter().map(|g| model.field(g, self.theta)).collect(),
        }
    }

    pub fn sampling_map(&self) -> Result<SamplingMap> {
        let fields = self.fields()?;
        let refs: Vec<&DisplacementField> = fields.iter().collect();
        compose_sampling_map_with(&self.homography, &refs, self.canvas.0, self.canvas.1, self.composition)
    }

    /// Warps `src` onto the parameter canvas.
    pub fn apply(&self, src: &ImageBuffer) -> Result<(ImageBuffer, Mask)> {
        Ok(warp_image(src, &self.sampling_map()?))
    }

    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("model".into(), json!(self.model.map_or("homography", |m| m.name())));
        if let Some(first) = self.grids.first() {
            let (m, n) = first.cells();
            obj.insert("grid".into(), json!([m, n]));
        }
        obj.insert("theta".into(), json!(self.theta));
        obj.insert("H".into(), json!(self.homography.to_row_array().to_vec()));
        if let Some(first) = self.grids.first() {
            obj.insert("displacements".into(), json!(first.flat_displacements()));
        }
        obj.insert("canvas".into(), json!([self.canvas.0, self.canvas.1]));
        if self.grids.len() > 1 {
            let stages: Vec<Value> = self.grids[1..]
                .iter()
                .map(|g| {
                    let (m, n) = g.cells();
                    json!({"grid": [m, n], "displacements": g.flat_displacements()})
                })
                .collect();
            obj.insert("stages".into(), Value::Array(stages));
        }
        if self.composition == Composition::Sequential {
            obj.insert("composition".into(), json!("sequential"));
        }
        Value::Object(obj)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("params serialize") + "\n"
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| {
            let key = if e.is_eof() { last_open_key(text) } else { None };
            schema(key.unwrap_or("(document)"), e.to_string())
        })?;
        Self::from_json(&value)
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| schema("(document)", "expected an object"))?;
        let model_name = obj
            .get("model")
            .ok_or_else(|| schema("model", "missing"))?
            .as_str()
            .ok_or_else(|| schema("model", "expected a string"))?;
        let model = match model_name {
            "homography" => None,
            "asma" => return Err(schema("model", "'asma' describes a regression head, not a warp")),
            other => Some(
                other
                    .parse::<DeformationModel>()
                    .map_err(|_| schema("model", format!("unknown model '{other}'")))?,
            ),
        };
        let canvas = pair(obj, "canvas")?;
        let h_vals = reals(obj.get("H").ok_or_else(|| schema("H", "missing"))?, "H")?;
        let h_arr: [f64; 9] = h_vals
            .as_slice()
            .try_into()
            .map_err(|_| schema("H", format!("expected 9 entries, got {}", h_vals.len())))?;
        let homography = Homography::from_row_slice(&h_arr).map_err(|e| schema("H", e.to_string()))?;
        let theta = match obj.get("theta") {
            Some(v) => {
                let t = v.as_f64().ok_or_else(|| schema("theta", "expected a number"))?;
                if !(t > 0.0 && t.is_finite()) {
                    return Err(schema("theta", format!("must be positive, got {t}")));
                }
                t
            }
            None if model.is_none() => 0.75,
            None => return Err(schema("theta", "missing")),
        };
        let composition = match obj.get("composition").map(|v| v.as_str()) {
            None | Some(Some("additive")) => Composition::Additive,
            Some(Some("sequential")) => Composition::Sequential,
            Some(_) => return Err(schema("composition", "expected 'additive' or 'sequential'")),
        };
        let mut grids = Vec::new();
        if model.is_some() {
            grids.push(grid_from(obj, "", canvas)?);
            if let Some(stages) = obj.get("stages") {
                let list = stages.as_array().ok_or_else(|| schema("stages", "expected an array"))?;
                for (i, s) in list.iter().enumerate() {
                    let so = s
                        .as_object()
                        .ok_or_else(|| schema(&format!("stages[{i}]"), "expected an object"))?;
                    grids.push(grid_from(so, &format!("stages[{i}]."), canvas)?);
                }
            }
        }
        Ok(Self {
            model,
            theta,
            homography,
            grids,
            canvas,
            composition,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }
}

/// The last object key that was started before the text ran out.
fn last_open_key(text: &str) -> Option<&str> {
    let colon = text.rfind("\":")?;
    let start = text[..colon].rfind('"')? + 1;
    Some(&text[start..colon])
}

fn schema(key: &str, reason: impl Into<String>) -> Error {
    Error::Schema {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn reals(v: &Value, key: &str) -> Result<Vec<f64>> {
    let arr = v.as_array().ok_or_else(|| schema(key, "expected an array"))?;
    arr.iter()
        .enumerate()
        .map(|(i, x)| {
            x.as_f64()
                .filter(|f| f.is_finite())
                .ok_or_else(|| schema(key, format!("entry {i} is not a finite number")))
        })
        .collect()
}

fn pair(obj: &Map<String, Value>, key: &str) -> Result<(usize, usize)> {
    let arr = obj
        .get(key)
        .ok_or_else(|| schema(key, "missing"))?
        .as_array()
        .ok_or_else(|| schema(key, "expected [a, b]"))?;
    let vals: Vec<u64> = arr.iter().filter_map(|v| v.as_u64()).collect();
    if arr.len() != 2 || vals.len() != 2 || vals.contains(&0) {
        return Err(schema(key, "expected two positive integers"));
    }
    Ok((vals[0] as usize, vals[1] as usize))
}

fn grid_from(obj: &Map<String, Value>, prefix: &str, canvas: (usize, usize)) -> Result<ControlGrid> {
    let key = |k: &str| format!("{prefix}{k}");
    let (m, n) = pair(obj, "grid").map_err(|e| rekey(e, &key("grid")))?;
    let flat = reals(
        obj.get("displacements")
            .ok_or_else(|| schema(&key("displacements"), "missing"))?,
        &key("displacements"),
    )?;
    let expect = 2 * (m + 1) * (n + 1);
    if flat.len() != expect {
        return Err(schema(
            &key("displacements"),
            format!("expected {expect} values for a {m}x{n} grid, got {}", flat.len()),
        ));
    }
    let mut grid = ControlGrid::new(m, n, canvas.0, canvas.1).map_err(|e| schema(&key("grid"), e.to_string()))?;
    grid.set_flat_displacements(&flat)?;
    Ok(grid)
}

fn rekey(e: Error, key: &str) -> Error {
    match e {
        Error::Schema { reason, .. } => schema(key, reason),
        other => other,
    }
}

/// Serialized regression head: `{"model": "asma", "head": {...}}`.
pub fn head_to_json(head: &AsmaHead) -> Value {
    json!({"model": "asma", "head": head})
}

pub fn head_from_json(value: &Value) -> Result<AsmaHead> {
    if value.get("model").and_then(Value::as_str) != Some("asma") {
        return Err(schema("model", "expected 'asma'"));
    }
    let head = value.get("head").ok_or_else(|| schema("head", "missing"))?;
    serde_json::from_value(head.clone()).map_err(|e| schema("head", e.to_string()))
}
