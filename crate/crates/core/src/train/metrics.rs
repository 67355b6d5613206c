use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::sim::TimeSeries;

/// `||x - x_hat|| / ||x||` over a shared grid.
pub fn normalized_l2(reference: &TimeSeries, prediction: &TimeSeries) -> Result<f64> {
    if reference.len() != prediction.len() || reference.dt != prediction.dt || reference.t0 != prediction.t0 {
        return Err(Error::contract("series are not on the same grid"));
    }
    normalized_l2_slices(&reference.values, &prediction.values)
}

pub fn normalized_l2_slices(reference: &[f64], prediction: &[f64]) -> Result<f64> {
    if reference.len() != prediction.len() {
        return Err(Error::contract("series lengths differ"));
    }
    let den: f64 = reference.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(den > 0.0) {
        return Err(Error::UndefinedMetric("reference has zero norm".into()));
    }
    let num: f64 = reference
        .iter()
        .zip(prediction)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

/// `|est - truth| / |truth|`.
pub fn param_rel_error(truth: f64, est: f64) -> Result<f64> {
    if truth == 0.0 {
        return Err(Error::UndefinedMetric("true parameter is zero".into()));
    }
    Ok((est - truth).abs() / truth.abs())
}

/// Ordered name to value map; serializes as a JSON object in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedValues(pub Vec<(String, f64)>);

impl NamedValues {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn push(&mut self, name: impl Into<String>, v: f64) {
        self.0.push((name.into(), v));
    }

    pub fn max(&self) -> Option<(&str, f64)> {
        self.0
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, v)| (n.as_str(), *v))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

impl Serialize for NamedValues {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for NamedValues {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = NamedValues;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a map of names to numbers")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut a: A) -> std::result::Result<NamedValues, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = a.next_entry::<String, f64>()? {
                    out.push((k, v));
                }
                Ok(NamedValues(out))
            }
        }
        d.deserialize_map(V)
    }
}
