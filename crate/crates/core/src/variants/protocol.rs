//! Line-delimited JSON protocol spoken with external variant generators.
//!
//! Request: `{"version":1,"prompt_text":..,"prompt_features":[..],"n_variants":2,"seed":..}`
//! Response: `{"version":1,"variants":[{"text":..,"features":[..]},{"text":..,"features":[..]}]}`

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub version: u32,
    pub prompt_text: String,
    pub prompt_features: Vec<f64>,
    pub n_variants: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseVariant {
    pub text: String,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub version: u32,
    pub variants: Vec<ResponseVariant>,
}

fn excerpt(line: &str) -> String {
    line.chars().take(120).collect()
}

fn check_version(value: &serde_json::Value, line: &str) -> Result<()> {
    match value.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == PROTOCOL_VERSION as u64 => Ok(()),
        Some(v) => Err(Error::Protocol {
            message: format!("unsupported protocol version {v}"),
            excerpt: excerpt(line),
        }),
        None => Err(Error::Protocol {
            message: "record is missing \"version\"".into(),
            excerpt: excerpt(line),
        }),
    }
}

impl GenerationRequest {
    pub fn new(prompt_text: String, prompt_features: Vec<f64>, seed: u64) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            prompt_text,
            prompt_features,
            n_variants: 2,
            seed,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Protocol {
            message: format!("malformed request JSON: {e}"),
            excerpt: excerpt(line),
        })?;
        check_version(&value, line)?;
        serde_json::from_value(value).map_err(|e| Error::Protocol {
            message: format!("malformed request: {e}"),
            excerpt: excerpt(line),
        })
    }
}

impl GenerationResponse {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }

    /// Parses a response line and checks it carries exactly two variants.
    pub fn parse_line(line: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Protocol {
            message: format!("malformed response JSON: {e}"),
            excerpt: excerpt(line),
        })?;
        check_version(&value, line)?;
        let resp: GenerationResponse =
            serde_json::from_value(value).map_err(|e| Error::Protocol {
                message: format!("malformed response: {e}"),
                excerpt: excerpt(line),
            })?;
        if resp.variants.len() != 2 {
            return Err(Error::Protocol {
                message: format!("expected 2 variants, got {}", resp.variants.len()),
                excerpt: excerpt(line),
            });
        }
        if resp.variants.iter().any(|v| v.features.iter().any(|f| !f.is_finite())) {
            return Err(Error::Protocol {
                message: "variant features must be finite".into(),
                excerpt: excerpt(line),
            });
        }
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_round_trips() {
        let r = GenerationRequest::new("hello".into(), vec![0.5, -1.0], 9);
        assert_eq!(GenerationRequest::parse_line(&r.to_line()).unwrap(), r);
    }

    #[test]
    fn missing_version_is_rejected() {
        let line = r#"{"variants":[{"text":"a","features":[]},{"text":"b","features":[]}]}"#;
        match GenerationResponse::parse_line(line) {
            Err(Error::Protocol { message, excerpt }) => {
                assert!(message.contains("version"));
                assert!(excerpt.starts_with("{\"variants\""));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_variant_count_and_garbage_are_rejected() {
        let one = r#"{"version":1,"variants":[{"text":"a","features":[]}]}"#;
        assert!(matches!(
            GenerationResponse::parse_line(one),
            Err(Error::Protocol { .. })
        ));
        assert!(matches!(
            GenerationResponse::parse_line("not json"),
            Err(Error::Protocol { .. })
        ));
        let v2 = r#"{"version":2,"variants":[]}"#;
        assert!(matches!(
            GenerationResponse::parse_line(v2),
            Err(Error::Protocol { .. })
        ));
    }
}
