//! Detection-quality assessment: localized QA of every detected box, plus
//! tile-wise judging of the whole diagram for missing objects.
//!
//! Both paths run per-item requests in parallel up to `max_concurrency` and
//! assemble results in a fixed order (detection order, tile order), so
//! reports are deterministic regardless of scheduling. Unparseable replies
//! are retried once with a stricter output instruction, then handled
//! conservatively: a detection falls back to `relocalize` rather than being
//! dropped over a formatting failure, and a tile is recorded as failed
//! rather than aborting the diagram.

use crate::gateway::{Backend, GatewayError, OracleContext, ParsedPayload, TokenUsage};
use crate::grounding::{
    build_box_qa_prompt, build_missing_judge_prompt, CoordStyle, GroundingMode, PromptBundle,
    PromptTemplates,
};
use crate::imaging::{crop_region, tile_diagram, OverlayStyle, TileIndex, TilingError};
use crate::model::{BoundingBox, Dataset, DetectionSet, Diagram};
use crate::parallel::run_bounded;
use image::RgbImage;
use serde::{Deserialize, Serialize};

/// Instruction appended on the single re-ask after an unparseable reply.
const STRICT_SUFFIX: &str = "\n\nOutput only the JSON block, with no prose before or after it.";

/// What to do with a detection after QA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disposition {
    /// Real symbol, tight box, correct class: passes through unchanged.
    Keep,
    /// No symbol present: removed from the output.
    Drop,
    /// Loose box or wrong class: routed to refinement.
    Relocalize,
}

/// Per-detection QA verdict. The disposition is derived: `keep` iff
/// valid ∧ tight ∧ class_ok, `drop` iff ¬valid, `relocalize` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxVerdict {
    pub detection_id: String,
    pub valid: bool,
    pub tight: bool,
    pub class_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposed_class: Option<String>,
    pub disposition: Disposition,
}

impl BoxVerdict {
    pub fn derive(
        detection_id: String,
        valid: bool,
        tight: bool,
        class_ok: bool,
        proposed_class: Option<String>,
    ) -> Self {
        let disposition = if !valid {
            Disposition::Drop
        } else if tight && class_ok {
            Disposition::Keep
        } else {
            Disposition::Relocalize
        };
        Self {
            detection_id,
            valid,
            tight,
            class_ok,
            proposed_class,
            disposition,
        }
    }
}

/// A judge assertion that a symbol is present in the diagram but absent
/// from the detections. Coordinates are in diagram space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingClaim {
    pub diagram_id: String,
    pub tile_index: TileIndex,
    pub approx_bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suspected_class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nearby_tag: Option<String>,
    #[serde(default)]
    pub rationale: String,
}

/// Assessment output for one diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentReport {
    pub diagram_id: String,
    pub verdicts: Vec<BoxVerdict>,
    /// Deduplicated missing-object claims.
    pub claims: Vec<MissingClaim>,
    pub tiles_failed: Vec<TileIndex>,
    pub prompt_template_version: String,
}

/// Knobs shared by both assessment paths.
#[derive(Debug, Clone)]
pub struct AssessorConfig {
    pub mode: GroundingMode,
    pub style: OverlayStyle,
    pub coord_style: CoordStyle,
    pub tile_size: u32,
    pub stride: u32,
    /// Context margin for box-QA crops, as a fraction of the box size.
    pub box_qa_margin: f64,
    /// IoU at which two same-class claims collapse into one.
    pub dedup_iou: f64,
    pub max_concurrency: usize,
}

impl Default for AssessorConfig {
    fn default() -> Self {
        Self {
            mode: GroundingMode::VisualTagsCoords,
            style: OverlayStyle::default(),
            coord_style: CoordStyle::Pixels,
            tile_size: 1024,
            stride: 896,
            box_qa_margin: 0.5,
            dedup_iou: 0.5,
            max_concurrency: 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AssessError {
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Asks once, re-asks once with the strict suffix when the reply does not
/// parse. `Ok(None)` means both replies were unusable.
fn ask_with_retry(
    backend: &Backend,
    bundle: &PromptBundle,
    ctx: Option<&OracleContext>,
    usage: &mut TokenUsage,
) -> Result<Option<ParsedPayload>, GatewayError> {
    let response = backend.complete(bundle, ctx)?;
    *usage += response.token_usage;
    if response.parsed.is_some() {
        return Ok(response.parsed);
    }
    log::warn!("unparseable reply for {}, re-asking strictly", bundle.key());
    let strict = PromptBundle {
        text: format!("{}{STRICT_SUFFIX}", bundle.text),
        ..bundle.clone()
    };
    let second = backend.complete(&strict, ctx)?;
    *usage += second.token_usage;
    Ok(second.parsed)
}

/// QA of every detected box: crop, ask, derive the disposition.
///
/// Always returns one verdict per detection; per-item backend failures
/// degrade to a conservative `relocalize` verdict instead of aborting.
#[allow(clippy::too_many_arguments)]
pub fn assess_detected_boxes(
    dataset: &Dataset,
    diagram: &Diagram,
    image: &RgbImage,
    detections: &DetectionSet,
    backend: &Backend,
    ctx: Option<&OracleContext>,
    config: &AssessorConfig,
    templates: &PromptTemplates,
) -> (Vec<BoxVerdict>, TokenUsage) {
    let results = run_bounded(
        &detections.detections,
        config.max_concurrency,
        |_, detection| {
            let (crop, window) = crop_region(image, &detection.bbox, config.box_qa_margin);
            let bundle = build_box_qa_prompt(
                &crop,
                &window,
                &diagram.id,
                detection,
                &dataset.classes,
                &config.style,
                templates,
            );
            let mut usage = TokenUsage::default();
            let payload = match ask_with_retry(backend, &bundle, ctx, &mut usage) {
                Ok(payload) => payload,
                Err(err) => {
                    log::warn!("box-qa for {} failed: {err}", bundle.key());
                    None
                }
            };
            let verdict = match payload {
                Some(ParsedPayload::BoxQa(reply)) => {
                    let class_ok = reply.class == detection.class_label;
                    let proposed = if class_ok { None } else { Some(reply.class) };
                    BoxVerdict::derive(
                        detection.id.clone(),
                        reply.valid,
                        reply.tight,
                        class_ok,
                        proposed,
                    )
                }
                // Conservative: never silently drop a detection over a
                // formatting or transport failure.
                _ => BoxVerdict::derive(detection.id.clone(), true, false, true, None),
            };
            (verdict, usage)
        },
    );

    let mut usage = TokenUsage::default();
    let verdicts = results
        .into_iter()
        .map(|(verdict, u)| {
            usage += u;
            verdict
        })
        .collect();
    (verdicts, usage)
}

/// Tile-wise missing-object judging. Returns raw (pre-dedup) claims in tile
/// order plus the tiles whose replies never parsed.
#[allow(clippy::too_many_arguments)]
pub fn assess_missing_objects(
    dataset: &Dataset,
    diagram: &Diagram,
    image: &RgbImage,
    detections: &DetectionSet,
    backend: &Backend,
    ctx: Option<&OracleContext>,
    config: &AssessorConfig,
    templates: &PromptTemplates,
) -> Result<(Vec<MissingClaim>, Vec<TileIndex>, TokenUsage), AssessError> {
    let grid = tile_diagram(&diagram.id, image, config.tile_size, config.stride)?;
    let tag_lookup = |id: &str| diagram.symbol(id).and_then(|s| s.tag.clone());

    let results = run_bounded(&grid.tiles, config.max_concurrency, |_, tile| {
        let bundle = build_missing_judge_prompt(
            tile,
            &diagram.id,
            detections,
            &tag_lookup,
            config.mode,
            &config.style,
            &dataset.classes,
            templates,
            config.coord_style,
        );
        let mut usage = TokenUsage::default();
        let claims = match ask_with_retry(backend, &bundle, ctx, &mut usage) {
            Ok(Some(ParsedPayload::Claims(raw_claims))) => Some(
                raw_claims
                    .into_iter()
                    .map(|raw| {
                        let in_diagram = raw
                            .bbox
                            .offset_by(tile.window.x, tile.window.y)
                            .clamped_to(diagram.width, diagram.height)
                            .unwrap_or(raw.bbox);
                        MissingClaim {
                            diagram_id: diagram.id.clone(),
                            tile_index: tile.index,
                            approx_bbox: in_diagram,
                            suspected_class: raw.class,
                            nearby_tag: raw.tag,
                            rationale: raw.note.unwrap_or_default(),
                        }
                    })
                    .collect::<Vec<_>>(),
            ),
            Ok(_) => None,
            Err(err) => {
                log::warn!("missing-judge tile {} failed: {err}", tile.index);
                None
            }
        };
        (tile.index, claims, usage)
    });

    let mut usage = TokenUsage::default();
    let mut claims = Vec::new();
    let mut tiles_failed = Vec::new();
    for (index, tile_claims, u) in results {
        usage += u;
        match tile_claims {
            Some(list) => claims.extend(list),
            None => tiles_failed.push(index),
        }
    }
    Ok((claims, tiles_failed, usage))
}

/// Greedy same-class claim deduplication.
///
/// Claims are visited sorted by (y, x, w, h, class, tile); a claim is kept
/// unless it overlaps an already-kept claim at `iou_threshold` or more and
/// the two suspected classes are compatible (equal, or either unknown).
/// Idempotent: the kept set never contains such a conflicting pair.
pub fn dedup_claims(claims: &[MissingClaim], iou_threshold: f64) -> Vec<MissingClaim> {
    assert!(
        iou_threshold > 0.0 && iou_threshold <= 1.0,
        "dedup iou_threshold must be in (0, 1]"
    );
    let mut sorted: Vec<&MissingClaim> = claims.iter().collect();
    sorted.sort_by(|a, b| {
        let ka = (a.approx_bbox.y, a.approx_bbox.x, a.approx_bbox.w, a.approx_bbox.h);
        let kb = (b.approx_bbox.y, b.approx_bbox.x, b.approx_bbox.w, b.approx_bbox.h);
        ka.cmp(&kb)
            .then_with(|| a.suspected_class.cmp(&b.suspected_class))
            .then_with(|| a.tile_index.cmp(&b.tile_index))
    });

    let mut kept: Vec<MissingClaim> = Vec::new();
    for claim in sorted {
        let duplicate = kept.iter().any(|existing| {
            let class_compatible = match (&existing.suspected_class, &claim.suspected_class) {
                (Some(a), Some(b)) => a == b,
                _ => true,
            };
            class_compatible
                && crate::model::iou(&existing.approx_bbox, &claim.approx_bbox) >= iou_threshold
        });
        if !duplicate {
            kept.push(claim.clone());
        }
    }
    kept
}

/// Runs both assessment paths for one diagram and assembles the report.
#[allow(clippy::too_many_arguments)]
pub fn assess_diagram(
    dataset: &Dataset,
    diagram: &Diagram,
    image: &RgbImage,
    detections: &DetectionSet,
    backend: &Backend,
    ctx: Option<&OracleContext>,
    config: &AssessorConfig,
    templates: &PromptTemplates,
) -> Result<(AssessmentReport, TokenUsage), AssessError> {
    let (verdicts, qa_usage) = assess_detected_boxes(
        dataset, diagram, image, detections, backend, ctx, config, templates,
    );
    let (raw_claims, tiles_failed, judge_usage) = assess_missing_objects(
        dataset, diagram, image, detections, backend, ctx, config, templates,
    )?;
    let claims = dedup_claims(&raw_claims, config.dedup_iou);
    let mut usage = qa_usage;
    usage += judge_usage;
    Ok((
        AssessmentReport {
            diagram_id: diagram.id.clone(),
            verdicts,
            claims,
            tiles_failed,
            prompt_template_version: templates.version().to_string(),
        },
        usage,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::{inject_errors, CorruptionSpec};
    use crate::gateway::ModelConfig;
    use crate::model::{Provenance, SymbolAnnotation};
    use image::{Rgb, RgbImage};

    fn bb(x: u32, y: u32, w: u32, h: u32) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn fixture_dataset() -> Dataset {
        // 3x3 grid of symbols inside a 600x600 diagram.
        let mut symbols = Vec::new();
        for i in 0..9u32 {
            let col = i % 3;
            let row = i / 3;
            symbols.push(SymbolAnnotation {
                id: format!("s{i}"),
                class_label: if i % 2 == 0 { "valve".into() } else { "pump".into() },
                bbox: bb(60 + col * 170, 60 + row * 170, 40, 32),
                tag: Some(format!("WX-{i:03}")),
            });
        }
        Dataset {
            name: "fixture".into(),
            classes: vec!["valve".into(), "pump".into()],
            diagrams: vec![Diagram {
                id: "d1".into(),
                image: "d1.png".into(),
                width: 600,
                height: 600,
                symbols,
            }],
        }
    }

    fn white(diagram: &Diagram) -> RgbImage {
        RgbImage::from_pixel(diagram.width, diagram.height, Rgb([255, 255, 255]))
    }

    fn small_tiles() -> AssessorConfig {
        AssessorConfig {
            tile_size: 400,
            stride: 300,
            max_concurrency: 2,
            ..AssessorConfig::default()
        }
    }

    fn claim(diagram_id: &str, bbox: BoundingBox, class: Option<&str>) -> MissingClaim {
        MissingClaim {
            diagram_id: diagram_id.into(),
            tile_index: TileIndex { row: 0, col: 0 },
            approx_bbox: bbox,
            suspected_class: class.map(str::to_string),
            nearby_tag: None,
            rationale: String::new(),
        }
    }

    #[test]
    fn perfect_verdicts_follow_injected_errors() {
        let dataset = fixture_dataset();
        let diagram = &dataset.diagrams[0];
        let spec = CorruptionSpec {
            omission_rate: 0.2,
            offset_rate: 0.3,
            offset_max_frac: 1.0,
            false_positive_rate: 0.2,
            class_swap_rate: 0.2,
            ..CorruptionSpec::clean(17)
        };
        let (detections, log) = inject_errors(diagram, &dataset.classes, &spec).unwrap();
        let ctx = OracleContext::new(&dataset, diagram, &log).with_detections(&detections);
        let backend = Backend::from_config(&ModelConfig::mock_perfect()).unwrap();
        let (verdicts, usage) = assess_detected_boxes(
            &dataset,
            diagram,
            &white(diagram),
            &detections,
            &backend,
            Some(&ctx),
            &small_tiles(),
            &PromptTemplates::builtin(),
        );
        assert_eq!(verdicts.len(), detections.detections.len());
        assert!(usage.input_tokens > 0);

        for verdict in &verdicts {
            if log.is_false_positive(&verdict.detection_id) {
                assert_eq!(verdict.disposition, Disposition::Drop);
            } else if let Some(swap) = log.class_swap(&verdict.detection_id) {
                assert_eq!(verdict.disposition, Disposition::Relocalize);
                assert_eq!(verdict.proposed_class.as_deref(), Some(swap.original_class.as_str()));
            } else if let Some(perturbed) = log.perturbation(&verdict.detection_id) {
                let iou = crate::model::iou(&perturbed.corrupted, &perturbed.original);
                if iou < crate::gateway::DEFAULT_TIGHTNESS_IOU {
                    assert_eq!(verdict.disposition, Disposition::Relocalize, "iou {iou}");
                } else {
                    assert_eq!(verdict.disposition, Disposition::Keep);
                }
            } else {
                assert_eq!(verdict.disposition, Disposition::Keep);
            }
        }
    }

    #[test]
    fn perfect_judge_claims_every_omitted_symbol_once() {
        let dataset = fixture_dataset();
        let diagram = &dataset.diagrams[0];
        let spec = CorruptionSpec {
            omission_rate: 0.5,
            ..CorruptionSpec::clean(23)
        };
        let (detections, log) = inject_errors(diagram, &dataset.classes, &spec).unwrap();
        let ctx = OracleContext::new(&dataset, diagram, &log).with_detections(&detections);
        let backend = Backend::from_config(&ModelConfig::mock_perfect()).unwrap();
        let config = small_tiles();
        let (raw, failed, _) = assess_missing_objects(
            &dataset,
            diagram,
            &white(diagram),
            &detections,
            &backend,
            Some(&ctx),
            &config,
            &PromptTemplates::builtin(),
        )
        .unwrap();
        assert!(failed.is_empty());
        // Overlapping tiles may claim the same symbol more than once.
        assert!(raw.len() >= log.omitted.len());

        let deduped = dedup_claims(&raw, config.dedup_iou);
        assert_eq!(deduped.len(), log.omitted.len());
        for id in &log.omitted {
            let gt = diagram.symbol(id).unwrap();
            assert!(
                deduped.iter().any(|c| c.approx_bbox == gt.bbox
                    && c.suspected_class.as_deref() == Some(gt.class_label.as_str())),
                "no claim at {} for omitted {id}",
                gt.bbox
            );
        }
    }

    #[test]
    fn tile_without_omissions_yields_no_claims() {
        let dataset = fixture_dataset();
        let diagram = &dataset.diagrams[0];
        let (detections, log) =
            inject_errors(diagram, &dataset.classes, &CorruptionSpec::clean(3)).unwrap();
        let ctx = OracleContext::new(&dataset, diagram, &log).with_detections(&detections);
        let backend = Backend::from_config(&ModelConfig::mock_perfect()).unwrap();
        let (raw, _, _) = assess_missing_objects(
            &dataset,
            diagram,
            &white(diagram),
            &detections,
            &backend,
            Some(&ctx),
            &small_tiles(),
            &PromptTemplates::builtin(),
        )
        .unwrap();
        assert!(raw.is_empty());
    }

    #[test]
    fn verdict_completeness_on_backend_failure() {
        let dataset = fixture_dataset();
        let diagram = &dataset.diagrams[0];
        let (detections, _log) =
            inject_errors(diagram, &dataset.classes, &CorruptionSpec::clean(3)).unwrap();
        let backend = Backend::from_config(&ModelConfig::mock_perfect()).unwrap();
        // No oracle context: every mock call errors; verdicts still complete.
        let (verdicts, _) = assess_detected_boxes(
            &dataset,
            diagram,
            &white(diagram),
            &detections,
            &backend,
            None,
            &small_tiles(),
            &PromptTemplates::builtin(),
        );
        assert_eq!(verdicts.len(), detections.detections.len());
        assert!(verdicts.iter().all(|v| v.disposition == Disposition::Relocalize));
    }

    #[test]
    fn dedup_keeps_disjoint_claims() {
        let claims = vec![
            claim("d", bb(0, 0, 10, 10), Some("valve")),
            claim("d", bb(50, 50, 10, 10), Some("valve")),
        ];
        assert_eq!(dedup_claims(&claims, 0.5).len(), 2);
    }

    #[test]
    fn dedup_collapses_identical_claims() {
        let claims = vec![
            claim("d", bb(5, 5, 10, 10), Some("valve")),
            claim("d", bb(5, 5, 10, 10), Some("valve")),
        ];
        assert_eq!(dedup_claims(&claims, 0.5).len(), 1);
    }

    #[test]
    fn dedup_chain_of_three_keeps_one() {
        // Three boxes, pairwise IoU 0.6: 10-wide boxes shifted by 2 and 4
        // have IoU 8/12 = 0.667 and 6/14 = 0.43 -- so use overlapping boxes
        // built to give pairwise overlap >= 0.5 with the first kept claim.
        let a = bb(0, 0, 20, 10);
        let b = bb(4, 0, 20, 10); // IoU with a: 16/24 = 0.667
        let c = bb(6, 0, 20, 10); // IoU with a: 14/26 = 0.538
        let claims = vec![
            claim("d", a, Some("valve")),
            claim("d", b, Some("valve")),
            claim("d", c, Some("valve")),
        ];
        let kept = dedup_claims(&claims, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].approx_bbox, a);
    }

    #[test]
    fn dedup_respects_distinct_classes() {
        // Different suspected classes do not suppress each other.
        let typed = vec![
            claim("d", bb(0, 0, 10, 10), Some("valve")),
            claim("d", bb(0, 0, 10, 10), Some("pump")),
        ];
        assert_eq!(dedup_claims(&typed, 0.5).len(), 2);

        // A class-unknown claim is compatible with every class: it sorts
        // first at the same box and absorbs both typed duplicates.
        let mut with_unknown = typed.clone();
        with_unknown.push(claim("d", bb(0, 0, 10, 10), None));
        let kept = dedup_claims(&with_unknown, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].suspected_class, None);
    }

    #[test]
    fn dedup_is_idempotent() {
        let claims = vec![
            claim("d", bb(0, 0, 14, 12), Some("valve")),
            claim("d", bb(2, 1, 14, 12), Some("valve")),
            claim("d", bb(40, 0, 14, 12), None),
            claim("d", bb(41, 1, 14, 12), Some("pump")),
            claim("d", bb(0, 40, 14, 12), Some("pump")),
        ];
        let once = dedup_claims(&claims, 0.5);
        let twice = dedup_claims(&once, 0.5);
        assert_eq!(once, twice);
    }

    #[test]
    fn omitted_symbol_in_tile_overlap_is_claimed_twice_then_deduped() {
        // With tile 400 / stride 300 over 600x600, the column windows are
        // [0,400) and [300,600): x in [300,400) lies in both. Place the
        // omitted symbol inside that overlap in both axes.
        let mut dataset = fixture_dataset();
        dataset.diagrams[0].symbols.push(SymbolAnnotation {
            id: "s9".into(),
            class_label: "valve".into(),
            bbox: bb(330, 330, 40, 32),
            tag: Some("WX-009".into()),
        });
        let diagram = &dataset.diagrams[0];
        let mut detections = Vec::new();
        for s in &diagram.symbols {
            if s.id == "s9" {
                continue;
            }
            detections.push(crate::model::DetectionRecord {
                id: s.id.clone(),
                class_label: s.class_label.clone(),
                bbox: s.bbox,
                score: 0.9,
                provenance: Provenance::Base,
            });
        }
        let detections = DetectionSet { diagram_id: "d1".into(), detections };
        let log = crate::corruption::InjectionLog {
            diagram_id: "d1".into(),
            omitted: vec!["s9".into()],
            perturbed: vec![],
            false_positives: vec![],
            class_swapped: vec![],
        };
        let ctx = OracleContext::new(&dataset, diagram, &log).with_detections(&detections);
        let backend = Backend::from_config(&ModelConfig::mock_perfect()).unwrap();
        let config = small_tiles();
        let (raw, _, _) = assess_missing_objects(
            &dataset,
            diagram,
            &white(diagram),
            &detections,
            &backend,
            Some(&ctx),
            &config,
            &PromptTemplates::builtin(),
        )
        .unwrap();
        assert!(raw.len() >= 2, "expected multi-tile raw claims, got {}", raw.len());
        let deduped = dedup_claims(&raw, config.dedup_iou);
        assert_eq!(deduped.len(), 1);
        assert_eq!(deduped[0].approx_bbox, diagram.symbol("s9").unwrap().bbox);
    }
}
