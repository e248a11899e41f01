//! Structured reply schemas and the response parser.
//!
//! Judge and detector replies arrive as prose with a fenced JSON block; the
//! parser extracts the last fenced block (or the whole text when it is bare
//! JSON), deserializes it against the bundle's schema, and bounds-checks
//! every coordinate against the tile or crop the prompt showed.

use crate::grounding::ResponseSchema;
use crate::model::BoundingBox;
use serde::{Deserialize, Serialize};

/// One missing-object claim as replied by the judge, in tile-local pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawClaim {
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// The three box-QA answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxQaReply {
    pub valid: bool,
    pub tight: bool,
    pub class: String,
}

/// One detection replied by the region detector, in crop-local pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub class: String,
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// A schema-validated reply payload.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedPayload {
    Claims(Vec<RawClaim>),
    BoxQa(BoxQaReply),
    Detections(Vec<RawDetection>),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("no JSON block found in response")]
    NoJsonFound,
    #[error("response does not match the {schema} schema: {detail}")]
    SchemaMismatch { schema: &'static str, detail: String },
    #[error("coordinate out of bounds: box {bbox} exceeds the {extent_w}x{extent_h} image")]
    CoordinateOutOfBounds {
        bbox: String,
        extent_w: u32,
        extent_h: u32,
    },
}

// Wire shapes. Extra fields from chatty models are tolerated; bbox arrays
// are taken as signed integers so negative coordinates surface as
// out-of-bounds errors rather than integer-parse noise.
#[derive(Deserialize)]
struct ClaimsWire {
    claims: Vec<ClaimWire>,
}

#[derive(Deserialize)]
struct ClaimWire {
    bbox: [i64; 4],
    #[serde(default)]
    class: Option<String>,
    #[serde(default)]
    tag: Option<String>,
    #[serde(default)]
    note: Option<String>,
}

#[derive(Deserialize)]
struct BoxQaWire {
    valid: bool,
    tight: bool,
    class: String,
}

#[derive(Deserialize)]
struct DetectionsWire {
    detections: Vec<DetectionWire>,
}

#[derive(Deserialize)]
struct DetectionWire {
    class: String,
    bbox: [i64; 4],
    #[serde(default)]
    score: Option<f64>,
}

/// Extracts the content of the last complete ``` fenced block, stripping an
/// optional language tag line.
fn last_fenced_block(text: &str) -> Option<&str> {
    let mut blocks = Vec::new();
    let mut rest = text;
    let mut offset = 0;
    while let Some(start) = rest.find("```") {
        let after_open = offset + start + 3;
        let body = &text[after_open..];
        let Some(end) = body.find("```") else { break };
        blocks.push(&body[..end]);
        let consumed = after_open + end + 3;
        rest = &text[consumed..];
        offset = consumed;
    }
    let block = blocks.pop()?;
    // Drop a language tag such as "json" on the opening line.
    let block = match block.split_once('\n') {
        Some((first, remainder))
            if first.trim().chars().all(|c| c.is_ascii_alphanumeric()) && !first.trim().is_empty() =>
        {
            remainder
        }
        _ => block,
    };
    Some(block.trim())
}

fn json_payload(raw_text: &str) -> Result<&str, ParseError> {
    if let Some(block) = last_fenced_block(raw_text) {
        return Ok(block);
    }
    let trimmed = raw_text.trim();
    if trimmed.starts_with('{') || trimmed.starts_with('[') {
        return Ok(trimmed);
    }
    Err(ParseError::NoJsonFound)
}

fn checked_box(
    raw: [i64; 4],
    extent_w: u32,
    extent_h: u32,
    schema: &'static str,
) -> Result<BoundingBox, ParseError> {
    let [x, y, w, h] = raw;
    if w < 1 || h < 1 {
        return Err(ParseError::SchemaMismatch {
            schema,
            detail: format!("bbox [{x},{y},{w},{h}] has non-positive extent"),
        });
    }
    let oob = ParseError::CoordinateOutOfBounds {
        bbox: format!("[{x},{y},{w},{h}]"),
        extent_w,
        extent_h,
    };
    if x < 0 || y < 0 || x + w > extent_w as i64 || y + h > extent_h as i64 {
        return Err(oob);
    }
    Ok(BoundingBox {
        x: x as u32,
        y: y as u32,
        w: w as u32,
        h: h as u32,
    })
}

/// Parses a raw model reply against the expected schema.
pub fn parse_structured_response(
    raw_text: &str,
    schema: &ResponseSchema,
) -> Result<ParsedPayload, ParseError> {
    let payload = json_payload(raw_text)?;
    match schema {
        ResponseSchema::MissingJudge { tile_w, tile_h } => {
            let wire: ClaimsWire =
                serde_json::from_str(payload).map_err(|e| ParseError::SchemaMismatch {
                    schema: "missing-judge",
                    detail: e.to_string(),
                })?;
            let claims = wire
                .claims
                .into_iter()
                .map(|c| {
                    Ok(RawClaim {
                        bbox: checked_box(c.bbox, *tile_w, *tile_h, "missing-judge")?,
                        class: none_if_empty(c.class),
                        tag: none_if_empty(c.tag),
                        note: none_if_empty(c.note),
                    })
                })
                .collect::<Result<Vec<_>, ParseError>>()?;
            Ok(ParsedPayload::Claims(claims))
        }
        ResponseSchema::BoxQa { .. } => {
            let wire: BoxQaWire =
                serde_json::from_str(payload).map_err(|e| ParseError::SchemaMismatch {
                    schema: "box-qa",
                    detail: e.to_string(),
                })?;
            if wire.class.is_empty() {
                return Err(ParseError::SchemaMismatch {
                    schema: "box-qa",
                    detail: "class must be non-empty".into(),
                });
            }
            Ok(ParsedPayload::BoxQa(BoxQaReply {
                valid: wire.valid,
                tight: wire.tight,
                class: wire.class,
            }))
        }
        ResponseSchema::RegionDetect { crop_w, crop_h } => {
            let wire: DetectionsWire =
                serde_json::from_str(payload).map_err(|e| ParseError::SchemaMismatch {
                    schema: "region-detect",
                    detail: e.to_string(),
                })?;
            let detections = wire
                .detections
                .into_iter()
                .map(|d| {
                    if d.class.is_empty() {
                        return Err(ParseError::SchemaMismatch {
                            schema: "region-detect",
                            detail: "class must be non-empty".into(),
                        });
                    }
                    if let Some(score) = d.score {
                        if !(0.0..=1.0).contains(&score) {
                            return Err(ParseError::SchemaMismatch {
                                schema: "region-detect",
                                detail: format!("score {score} outside [0,1]"),
                            });
                        }
                    }
                    Ok(RawDetection {
                        class: d.class,
                        bbox: checked_box(d.bbox, *crop_w, *crop_h, "region-detect")?,
                        score: d.score,
                    })
                })
                .collect::<Result<Vec<_>, ParseError>>()?;
            Ok(ParsedPayload::Detections(detections))
        }
    }
}

fn none_if_empty(v: Option<String>) -> Option<String> {
    v.filter(|s| !s.is_empty())
}

/// Renders a payload the way a well-behaved model replies: a short preamble
/// and a fenced JSON block. `parse_structured_response` inverts this.
pub fn render_payload(payload: &ParsedPayload) -> String {
    let json = match payload {
        ParsedPayload::Claims(claims) => {
            serde_json::to_string(&serde_json::json!({ "claims": claims }))
        }
        ParsedPayload::BoxQa(reply) => serde_json::to_string(reply),
        ParsedPayload::Detections(dets) => {
            serde_json::to_string(&serde_json::json!({ "detections": dets }))
        }
    }
    .expect("payload serialization cannot fail");
    format!("Assessment complete.\n```json\n{json}\n```\n")
}
