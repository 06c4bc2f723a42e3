//! Fixed-precision float encoding for JSON outputs.
//!
//! Every float that crosses a file or wire boundary is written as a
//! 17-significant-digit scientific literal. 17 digits identify any `f64`
//! uniquely, so parsing the text back yields the identical bit pattern.

use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

/// `x` as a 17-significant-digit decimal, e.g. `2.5600000000000000e2`.
pub fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}

fn raw(x: f64) -> Result<Box<RawValue>, String> {
    if !x.is_finite() {
        return Err(format!("cannot encode non-finite float {x} as JSON"));
    }
    RawValue::from_string(sig17(x)).map_err(|e| e.to_string())
}

pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    raw(*x).map_err(serde::ser::Error::custom)?.serialize(s)
}

pub fn serialize_vec<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(xs.len()))?;
    for x in xs {
        seq.serialize_element(&raw(*x).map_err(serde::ser::Error::custom)?)?;
    }
    seq.end()
}

/// Wrapper for ad-hoc values (e.g. a single float inside `json!`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sig17(pub f64);

impl Serialize for Sig17 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serialize(&self.0, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Probe {
        #[serde(serialize_with = "serialize")]
        x: f64,
        #[serde(serialize_with = "serialize_vec")]
        xs: Vec<f64>,
    }

    #[test]
    fn seventeen_digits_round_trip_bit_exact() {
        for x in [
            0.1,
            -0.2876820724517809,
            1.0 / 3.0,
            256.0,
            f64::MIN_POSITIVE,
            1e300,
        ] {
            let back: f64 = sig17(x).parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits());
        }
        assert_eq!(sig17(256.0), "2.5600000000000000e2");
    }

    #[test]
    fn serializes_raw_literals() {
        let s = serde_json::to_string(&Probe {
            x: 0.75,
            xs: vec![-1.0, 0.5],
        })
        .unwrap();
        assert_eq!(
            s,
            r#"{"x":7.5000000000000000e-1,"xs":[-1.0000000000000000e0,5.0000000000000000e-1]}"#
        );
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["x"].as_f64(), Some(0.75));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(serde_json::to_string(&Sig17(f64::NAN)).is_err());
    }
}
