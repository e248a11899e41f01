//! Deterministic mock backends.
//!
//! `mock-perfect` answers every schema exactly from the injection answer key
//! and ground truth; `mock-noisy` degrades those answers per a
//! [`NoiseProfile`](super::NoiseProfile). Both are pure functions of
//! `(bundle, context, seed)`: every random decision draws from a substream
//! keyed by the entity it concerns, so results do not depend on call order
//! or thread scheduling.
//!
//! Claim keep/drop decisions and jitter are keyed per *symbol*, not per
//! tile: overlapping tiles then agree about a given symbol, duplicates
//! collapse in claim deduplication, and the measured judge recall tracks
//! `claim_detect_prob` exactly.

use super::schema::{BoxQaReply, ParsedPayload, RawClaim, RawDetection};
use super::{GatewayError, NoiseProfile, OracleContext};
use crate::grounding::{PromptBundle, ResponseSchema};
use crate::model::{iou, BoundingBox};
use crate::seeding::substream_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

fn to_local(b: &BoundingBox, window: &BoundingBox) -> BoundingBox {
    BoundingBox {
        x: b.x - window.x,
        y: b.y - window.y,
        w: b.w,
        h: b.h,
    }
}

/// Symbols the answer key marks as needing repair: omitted, perturbed, or
/// relabeled. Sorted by id.
fn needs_repair_ids(ctx: &OracleContext) -> Vec<String> {
    let mut ids: BTreeSet<String> = ctx.log.omitted.iter().cloned().collect();
    ids.extend(ctx.log.perturbed.iter().map(|p| p.id.clone()));
    ids.extend(ctx.log.class_swapped.iter().map(|s| s.id.clone()));
    ids.into_iter().collect()
}

pub(super) fn perfect_payload(
    bundle: &PromptBundle,
    ctx: &OracleContext,
) -> Result<ParsedPayload, GatewayError> {
    match &bundle.schema {
        ResponseSchema::MissingJudge { .. } => {
            let mut claims = Vec::new();
            for id in &ctx.log.omitted {
                let Some(symbol) = ctx.diagram.symbol(id) else { continue };
                // Claim only symbols fully inside this tile: their tile-local
                // coordinates are valid, and overlapping tiles emit identical
                // diagram-space boxes that deduplicate to one claim.
                if bundle.window.contains_box(&symbol.bbox) {
                    claims.push(RawClaim {
                        bbox: to_local(&symbol.bbox, &bundle.window),
                        class: Some(symbol.class_label.clone()),
                        tag: symbol.tag.clone(),
                        note: Some("symbol visible but not outlined".into()),
                    });
                }
            }
            Ok(ParsedPayload::Claims(claims))
        }
        ResponseSchema::BoxQa { .. } => {
            let detection = bundle
                .target_id
                .as_deref()
                .and_then(|id| ctx.detections.and_then(|set| set.detection(id)))
                .ok_or_else(|| GatewayError::MissingOracleContext {
                    detail: format!("box-qa target '{:?}' not in context detections", bundle.target_id),
                })?;
            let reply = match ctx.diagram.symbol(&detection.id) {
                Some(gt) => BoxQaReply {
                    valid: true,
                    tight: iou(&detection.bbox, &gt.bbox) >= ctx.tightness_iou,
                    class: gt.class_label.clone(),
                },
                // Not in ground truth: an injected false positive.
                None => BoxQaReply {
                    valid: false,
                    tight: false,
                    class: detection.class_label.clone(),
                },
            };
            Ok(ParsedPayload::BoxQa(reply))
        }
        ResponseSchema::RegionDetect { .. } => {
            let mut detections = Vec::new();
            for id in needs_repair_ids(ctx) {
                let Some(symbol) = ctx.diagram.symbol(&id) else { continue };
                if bundle.window.contains_box(&symbol.bbox) {
                    detections.push(RawDetection {
                        class: symbol.class_label.clone(),
                        bbox: to_local(&symbol.bbox, &bundle.window),
                        score: None,
                    });
                }
            }
            Ok(ParsedPayload::Detections(detections))
        }
    }
}

pub(super) fn noisy_payload(
    bundle: &PromptBundle,
    ctx: &OracleContext,
    profile: &NoiseProfile,
) -> Result<ParsedPayload, GatewayError> {
    let perfect = perfect_payload(bundle, ctx)?;
    let diagram_id = &bundle.diagram_id;
    match perfect {
        ParsedPayload::Claims(_) => {
            // Rebuild the claim list from the answer key with per-symbol
            // keep/jitter decisions, then add per-tile spurious claims.
            let mut claims = Vec::new();
            for id in &ctx.log.omitted {
                let Some(symbol) = ctx.diagram.symbol(id) else { continue };
                let mut rng = substream_rng(profile.seed, &format!("noisy-claim/{diagram_id}/{id}"));
                if rng.random::<f64>() >= profile.claim_detect_prob {
                    continue;
                }
                let jittered = jitter_box(
                    &symbol.bbox,
                    profile.jitter_frac,
                    ctx.diagram.width,
                    ctx.diagram.height,
                    &mut rng,
                );
                if bundle.window.contains_box(&jittered) {
                    claims.push(RawClaim {
                        bbox: to_local(&jittered, &bundle.window),
                        class: Some(symbol.class_label.clone()),
                        tag: symbol.tag.clone(),
                        note: Some("possible missed symbol".into()),
                    });
                }
            }

            if profile.spurious_claim_rate > 0.0 {
                let tile_key = bundle
                    .tile_index
                    .map(|t| t.to_string())
                    .unwrap_or_else(|| "t".into());
                let mut rng = substream_rng(
                    profile.seed,
                    &format!("noisy-spurious/{diagram_id}/{tile_key}"),
                );
                let count = poisson(profile.spurious_claim_rate, &mut rng);
                let (min_w, max_w, min_h, max_h) = symbol_size_range(ctx);
                for _ in 0..count {
                    let w = rng.random_range(min_w..=max_w).min(bundle.window.w);
                    let h = rng.random_range(min_h..=max_h).min(bundle.window.h);
                    let x = rng.random_range(0..=bundle.window.w - w);
                    let y = rng.random_range(0..=bundle.window.h - h);
                    let class = if ctx.classes.is_empty() {
                        None
                    } else {
                        Some(ctx.classes[rng.random_range(0..ctx.classes.len())].clone())
                    };
                    claims.push(RawClaim {
                        bbox: BoundingBox { x, y, w, h },
                        class,
                        tag: None,
                        note: Some("uncertain region".into()),
                    });
                }
            }
            Ok(ParsedPayload::Claims(claims))
        }
        ParsedPayload::BoxQa(mut reply) => {
            if profile.verdict_flip_prob > 0.0 {
                let target = bundle.target_id.clone().unwrap_or_default();
                let mut rng =
                    substream_rng(profile.seed, &format!("noisy-verdict/{diagram_id}/{target}"));
                if rng.random::<f64>() < profile.verdict_flip_prob {
                    reply.valid = !reply.valid;
                }
                if rng.random::<f64>() < profile.verdict_flip_prob {
                    reply.tight = !reply.tight;
                }
                if rng.random::<f64>() < profile.verdict_flip_prob {
                    let others: Vec<&String> =
                        ctx.classes.iter().filter(|c| **c != reply.class).collect();
                    if !others.is_empty() {
                        reply.class = others[rng.random_range(0..others.len())].clone();
                    }
                }
            }
            Ok(ParsedPayload::BoxQa(reply))
        }
        ParsedPayload::Detections(mut detections) => {
            if profile.jitter_frac > 0.0 {
                let target = bundle.target_id.clone().unwrap_or_default();
                let mut rng =
                    substream_rng(profile.seed, &format!("noisy-region/{diagram_id}/{target}"));
                for det in &mut detections {
                    let in_diagram = det.bbox.offset_by(bundle.window.x, bundle.window.y);
                    let jittered = jitter_box(
                        &in_diagram,
                        profile.jitter_frac,
                        ctx.diagram.width,
                        ctx.diagram.height,
                        &mut rng,
                    );
                    // Keep the jittered box inside the crop.
                    let clamped = clamp_into(&jittered, &bundle.window);
                    det.bbox = to_local(&clamped, &bundle.window);
                }
            }
            Ok(ParsedPayload::Detections(detections))
        }
    }
}

fn symbol_size_range(ctx: &OracleContext) -> (u32, u32, u32, u32) {
    let mut min_w = u32::MAX;
    let mut max_w = 1;
    let mut min_h = u32::MAX;
    let mut max_h = 1;
    for s in &ctx.diagram.symbols {
        min_w = min_w.min(s.bbox.w.max(1));
        max_w = max_w.max(s.bbox.w);
        min_h = min_h.min(s.bbox.h.max(1));
        max_h = max_h.max(s.bbox.h);
    }
    if min_w == u32::MAX {
        // Diagram with no symbols: fall back to a nominal size.
        (16, 48, 16, 48)
    } else {
        (min_w, max_w, min_h, max_h)
    }
}

fn jitter_box(b: &BoundingBox, jitter_frac: f64, img_w: u32, img_h: u32, rng: &mut ChaCha8Rng) -> BoundingBox {
    if jitter_frac <= 0.0 {
        return *b;
    }
    let max_dx = jitter_frac * b.w as f64;
    let max_dy = jitter_frac * b.h as f64;
    let dx = rng.random_range(-max_dx..=max_dx).round() as i64;
    let dy = rng.random_range(-max_dy..=max_dy).round() as i64;
    let x = (b.x as i64 + dx).clamp(0, (img_w.saturating_sub(b.w)) as i64) as u32;
    let y = (b.y as i64 + dy).clamp(0, (img_h.saturating_sub(b.h)) as i64) as u32;
    BoundingBox { x, y, w: b.w, h: b.h }
}

fn clamp_into(b: &BoundingBox, window: &BoundingBox) -> BoundingBox {
    let x = b.x.clamp(window.x, (window.right() as u32).saturating_sub(b.w).max(window.x));
    let y = b.y.clamp(window.y, (window.bottom() as u32).saturating_sub(b.h).max(window.y));
    let w = b.w.min(window.w);
    let h = b.h.min(window.h);
    BoundingBox { x, y, w, h }
}

/// Knuth's Poisson sampler; fine for the small rates used here.
fn poisson(lambda: f64, rng: &mut ChaCha8Rng) -> u32 {
    if lambda <= 0.0 {
        return 0;
    }
    let limit = (-lambda).exp();
    let mut k = 0u32;
    let mut p = 1.0;
    loop {
        p *= rng.random::<f64>();
        if p <= limit || k > 10_000 {
            return k;
        }
        k += 1;
    }
}
