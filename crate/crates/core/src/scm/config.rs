//! JSON model description.
//!
//! ```json
//! {
//!   "nodes": ["A", "E"],
//!   "edges": [["A", "E"]],
//!   "equations": {
//!     "A": {"kind": "linear", "coeffs": {}, "intercept": 0},
//!     "E": {"kind": "linear", "coeffs": {"A": 0.5}, "intercept": 0}
//!   },
//!   "noise": {
//!     "A": {"dist": "uniform", "a": -1, "b": 1},
//!     "E": {"dist": "truncated-gaussian", "mean": 0, "sd": 1, "lo": -3, "hi": 3}
//!   }
//! }
//! ```
//!
//! Tabulated equations use `{"kind": "tabulated", "grid": {parent: [..]}, "values": [..]}`
//! with `values` row-major in parent order. A root node may omit its equation (taken as zero);
//! every node needs a noise entry.

use serde_json::{json, Map, Value};

use super::{DagSpec, Equation, Noise, ScmModel, TabulatedMap};
use crate::error::{Error, Result};

fn field<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::invalid(format!("{path}.{key}"), "missing field"))
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| Error::invalid(path, "expected an object"))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array()
        .ok_or_else(|| Error::invalid(path, "expected an array"))
}

fn as_f64(v: &Value, path: &str) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::invalid(path, "expected a finite number"))
}

fn num(obj: &Map<String, Value>, key: &str, path: &str) -> Result<f64> {
    as_f64(field(obj, key, path)?, &format!("{path}.{key}"))
}

fn f64_list(v: &Value, path: &str) -> Result<Vec<f64>> {
    as_array(v, path)?
        .iter()
        .enumerate()
        .map(|(k, x)| as_f64(x, &format!("{path}[{k}]")))
        .collect()
}

/// Parses a model description. Error paths name the offending field, e.g. `noise.E.b`.
pub fn model_from_json(text: &str) -> Result<ScmModel> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| Error::invalid("$", format!("malformed JSON: {e}")))?;
    let root = as_object(&root, "$")?;

    let names: Vec<String> = as_array(field(root, "nodes", "$")?, "nodes")?
        .iter()
        .enumerate()
        .map(|(k, v)| {
            v.as_str()
                .map(str::to_owned)
                .ok_or_else(|| Error::invalid(format!("nodes[{k}]"), "expected a string"))
        })
        .collect::<Result<_>>()?;
    if names.is_empty() {
        return Err(Error::invalid("nodes", "at least one node is required"));
    }
    let index = |name: &str, path: &str| -> Result<usize> {
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(path, format!("unknown node `{name}`")))
    };
    for (k, name) in names.iter().enumerate() {
        if names[..k].contains(name) {
            return Err(Error::invalid(format!("nodes[{k}]"), format!("duplicate node `{name}`")));
        }
    }

    let mut edges = Vec::new();
    if let Some(raw) = root.get("edges") {
        for (k, e) in as_array(raw, "edges")?.iter().enumerate() {
            let path = format!("edges[{k}]");
            let pair = as_array(e, &path)?;
            if pair.len() != 2 {
                return Err(Error::invalid(path, "expected a [parent, child] pair"));
            }
            let end = |j: usize| -> Result<usize> {
                let p = format!("{path}[{j}]");
                let name = pair[j]
                    .as_str()
                    .ok_or_else(|| Error::invalid(&p, "expected a node name"))?;
                index(name, &p)
            };
            edges.push((end(0)?, end(1)?));
        }
    }
    let dag = DagSpec::from_edges(names.len(), &edges)?;

    let empty = Map::new();
    let equations_obj = match root.get("equations") {
        Some(v) => as_object(v, "equations")?,
        None => &empty,
    };
    for key in equations_obj.keys() {
        index(key, &format!("equations.{key}"))?;
    }
    let mut equations = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let path = format!("equations.{name}");
        let parents = dag.parents(i);
        let eq = match equations_obj.get(name) {
            None if parents.is_empty() => Equation::zero(0),
            None => return Err(Error::invalid(path, "missing equation for a node with parents")),
            Some(v) => parse_equation(v, &path, parents, &names)?,
        };
        equations.push(eq);
    }

    let noise_obj = as_object(field(root, "noise", "$")?, "noise")?;
    for key in noise_obj.keys() {
        index(key, &format!("noise.{key}"))?;
    }
    let noise = names
        .iter()
        .map(|name| {
            let path = format!("noise.{name}");
            let v = noise_obj
                .get(name)
                .ok_or_else(|| Error::invalid(&path, "missing field"))?;
            parse_noise(v, &path)
        })
        .collect::<Result<Vec<_>>>()?;

    ScmModel::new(names, dag, equations, noise)
}

fn parse_equation(v: &Value, path: &str, parents: &[usize], names: &[String]) -> Result<Equation> {
    let obj = as_object(v, path)?;
    let empty = Map::new();
    let kind = field(obj, "kind", path)?
        .as_str()
        .ok_or_else(|| Error::invalid(format!("{path}.kind"), "expected a string"))?;
    match kind {
        "linear" => {
            let intercept = match obj.get("intercept") {
                Some(x) => as_f64(x, &format!("{path}.intercept"))?,
                None => 0.0,
            };
            let cpath = format!("{path}.coeffs");
            let coeffs_obj = match obj.get("coeffs") {
                Some(c) => as_object(c, &cpath)?,
                None if parents.is_empty() => &empty,
                None => return Err(Error::invalid(cpath, "missing field")),
            };
            for key in coeffs_obj.keys() {
                if !parents.iter().any(|&p| names[p] == *key) {
                    return Err(Error::invalid(
                        format!("{cpath}.{key}"),
                        "coefficient for a node that is not a parent",
                    ));
                }
            }
            let coeffs = parents
                .iter()
                .map(|&p| {
                    let key = &names[p];
                    let c = coeffs_obj
                        .get(key)
                        .ok_or_else(|| Error::invalid(format!("{cpath}.{key}"), "missing field"))?;
                    as_f64(c, &format!("{cpath}.{key}"))
                })
                .collect::<Result<_>>()?;
            Ok(Equation::Linear { coeffs, intercept })
        }
        "tabulated" => {
            let gpath = format!("{path}.grid");
            let grid = as_object(field(obj, "grid", path)?, &gpath)?;
            let axes = parents
                .iter()
                .map(|&p| {
                    let key = &names[p];
                    let axis = grid
                        .get(key)
                        .ok_or_else(|| Error::invalid(format!("{gpath}.{key}"), "missing field"))?;
                    f64_list(axis, &format!("{gpath}.{key}"))
                })
                .collect::<Result<_>>()?;
            let values = f64_list(field(obj, "values", path)?, &format!("{path}.values"))?;
            TabulatedMap::new(axes, values)
                .map(Equation::Tabulated)
                .map_err(|e| Error::invalid(path, e.to_string()))
        }
        other => Err(Error::invalid(
            format!("{path}.kind"),
            format!("unknown equation kind `{other}`"),
        )),
    }
}

fn parse_noise(v: &Value, path: &str) -> Result<Noise> {
    let obj = as_object(v, path)?;
    let dist = field(obj, "dist", path)?
        .as_str()
        .ok_or_else(|| Error::invalid(format!("{path}.dist"), "expected a string"))?;
    match dist {
        "uniform" => Ok(Noise::Uniform {
            a: num(obj, "a", path)?,
            b: num(obj, "b", path)?,
        }),
        "truncated-gaussian" => Ok(Noise::TruncatedGaussian {
            mean: num(obj, "mean", path)?,
            sd: num(obj, "sd", path)?,
            lo: num(obj, "lo", path)?,
            hi: num(obj, "hi", path)?,
        }),
        "empirical" => Ok(Noise::Empirical {
            points: f64_list(field(obj, "points", path)?, &format!("{path}.points"))?,
        }),
        "gaussian" | "normal" => Err(Error::invalid(
            format!("{path}.dist"),
            "unbounded noise is not supported; use truncated-gaussian",
        )),
        other => Err(Error::invalid(
            format!("{path}.dist"),
            format!("unknown noise distribution `{other}`"),
        )),
    }
}

/// Serializes a model in the format read by [`model_from_json`].
pub fn model_to_json(model: &ScmModel) -> Value {
    let names = model.names();
    let mut edges = Vec::new();
    let mut equations = Map::new();
    let mut noise = Map::new();
    for (i, name) in names.iter().enumerate() {
        let parents = model.dag().parents(i);
        for &p in parents {
            edges.push(json!([names[p], name]));
        }
        let eq = match &model.equations()[i] {
            Equation::Linear { coeffs, intercept } => {
                let c: Map<String, Value> = parents
                    .iter()
                    .zip(coeffs)
                    .map(|(&p, &v)| (names[p].clone(), json!(v)))
                    .collect();
                json!({"kind": "linear", "coeffs": c, "intercept": intercept})
            }
            Equation::Tabulated(t) => {
                let g: Map<String, Value> = parents
                    .iter()
                    .zip(t.axes())
                    .map(|(&p, ax)| (names[p].clone(), json!(ax)))
                    .collect();
                json!({"kind": "tabulated", "grid": g, "values": t.values()})
            }
        };
        equations.insert(name.clone(), eq);
        let nz = match &model.noise()[i] {
            Noise::Uniform { a, b } => json!({"dist": "uniform", "a": a, "b": b}),
            Noise::TruncatedGaussian { mean, sd, lo, hi } => json!({
                "dist": "truncated-gaussian", "mean": mean, "sd": sd, "lo": lo, "hi": hi
            }),
            Noise::Empirical { points } => json!({"dist": "empirical", "points": points}),
        };
        noise.insert(name.clone(), nz);
    }
    json!({
        "nodes": names,
        "edges": edges,
        "equations": equations,
        "noise": noise,
    })
}
