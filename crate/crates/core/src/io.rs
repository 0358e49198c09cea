//! File formats: complex signals as CSV, everything else as JSON.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::signal::SampledSignal;

/// A list of SNR values with the same encoding as [`snr_db`].
pub mod snr_db_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Snr(#[serde(with = "super::snr_db")] f64);

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(values.iter().map(|v| Snr(*v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Snr>::deserialize(d)?.into_iter().map(|v| v.0).collect())
    }
}

/// Serializes an SNR in dB, writing infinities as the strings `"inf"` and
/// `"-inf"` since JSON has no literal for them.
pub mod snr_db {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_infinite() {
            s.serialize_str(if *value > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*value)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct SnrVisitor;

        impl Visitor<'_> for SnrVisitor {
            type Value = f64;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number or \"inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                match v.trim().to_ascii_lowercase().as_str() {
                    "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                    "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
                    other => other.parse().map_err(|_| E::custom(format!("invalid SNR '{v}'"))),
                }
            }
        }

        d.deserialize_any(SnrVisitor)
    }
}

/// Writes one `re,im` row per sample under a `re,im` header.
pub fn write_signal_csv(path: impl AsRef<Path>, signal: &[Complex64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["re", "im"])?;
    for z in signal {
        w.write_record([z.re.to_string(), z.im.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `re,im` rows. A header line is optional.
pub fn read_signal_csv(path: impl AsRef<Path>) -> Result<SampledSignal> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_signal_csv(&text)
}

pub fn parse_signal_csv(text: &str) -> Result<SampledSignal> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 2 {
            return Err(Error::Parse(format!(
                "line {}: expected 2 fields, found {}",
                line + 1,
                record.len()
            )));
        }
        let parsed = (record[0].parse::<f64>(), record[1].parse::<f64>());
        match parsed {
            (Ok(re), Ok(im)) => out.push(Complex64::new(re, im)),
            _ if line == 0 => continue,
            _ => {
                return Err(Error::Parse(format!(
                    "line {}: cannot parse '{},{}'",
                    line + 1,
                    &record[0],
                    &record[1]
                )))
            }
        }
    }
    Ok(SampledSignal::new(out))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
