//! Seeded corruption of ground truth into a synthetic detector output.
//!
//! Mimics the common failure modes of a base detector: missed symbols,
//! loosened or shifted boxes, wrong class labels, and false positives. Every
//! injected error is recorded in an [`InjectionLog`], the exact answer key
//! used later to score the judge.
//!
//! Sampling is fixed-count, not Bernoulli: each error kind affects exactly
//! `floor(rate * N)` symbols, selected by a seeded shuffle of the sorted
//! symbol ids. All draws come from one per-diagram substream keyed by
//! `(spec.seed, diagram.id)`, in a fixed order (shuffle, resize factors,
//! offsets, class swaps, false-positive placement, scores), so outputs are
//! byte-identical regardless of how diagrams are scheduled.

use crate::model::{iou, BoundingBox, DetectionRecord, DetectionSet, Diagram, Provenance};
use crate::seeding::substream_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Maximum IoU an injected false positive may have with any GT box. Keeps
/// the answer key unambiguous.
const FALSE_POSITIVE_MAX_IOU: f64 = 0.1;
/// Placement attempts per false positive before giving up.
const FALSE_POSITIVE_MAX_ATTEMPTS: usize = 100;

/// Rates and limits for error injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    /// Fraction of symbols dropped entirely.
    pub omission_rate: f64,
    /// Fraction of surviving symbols whose box dimensions are rescaled.
    pub resize_rate: f64,
    /// Maximum fractional change of each dimension under resize.
    pub resize_max_frac: f64,
    /// Fraction of surviving symbols whose box is shifted.
    pub offset_rate: f64,
    /// Maximum shift as a fraction of the box dimension.
    pub offset_max_frac: f64,
    /// False positives injected per diagram, as a fraction of the GT count.
    pub false_positive_rate: f64,
    /// Fraction of surviving symbols relabeled with a different class.
    pub class_swap_rate: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    /// An identity spec: no errors injected, scores still attached.
    pub fn clean(seed: u64) -> Self {
        Self {
            omission_rate: 0.0,
            resize_rate: 0.0,
            resize_max_frac: 0.0,
            offset_rate: 0.0,
            offset_max_frac: 0.0,
            false_positive_rate: 0.0,
            class_swap_rate: 0.0,
            seed,
        }
    }

    /// Checks rate ranges, plus the disjointness budget: resize, offset and
    /// class-swap fractions must sum to at most 1 so each surviving symbol
    /// receives at most one perturbation.
    pub fn validate(&self) -> Result<(), CorruptionError> {
        let unit = |name: &str, v: f64| -> Result<(), CorruptionError> {
            if !(0.0..=1.0).contains(&v) {
                return Err(CorruptionError::InvalidSpec(format!(
                    "{name} must be in [0,1], got {v}"
                )));
            }
            Ok(())
        };
        unit("omission_rate", self.omission_rate)?;
        unit("resize_rate", self.resize_rate)?;
        unit("offset_rate", self.offset_rate)?;
        unit("class_swap_rate", self.class_swap_rate)?;
        for (name, v) in [
            ("resize_max_frac", self.resize_max_frac),
            ("offset_max_frac", self.offset_max_frac),
            ("false_positive_rate", self.false_positive_rate),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CorruptionError::InvalidSpec(format!(
                    "{name} must be a non-negative finite number, got {v}"
                )));
            }
        }
        if self.resize_max_frac >= 1.0 {
            return Err(CorruptionError::InvalidSpec(format!(
                "resize_max_frac must be < 1, got {}",
                self.resize_max_frac
            )));
        }
        let budget = self.resize_rate + self.offset_rate + self.class_swap_rate;
        if budget > 1.0 + 1e-12 {
            return Err(CorruptionError::InvalidSpec(format!(
                "resize_rate + offset_rate + class_swap_rate must not exceed 1, got {budget}"
            )));
        }
        Ok(())
    }
}

/// How a surviving box was perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    Resize,
    Offset,
}

/// One perturbed box: the GT original and what the detector "reported".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedBox {
    pub id: String,
    pub original: BoundingBox,
    pub corrupted: BoundingBox,
    pub kind: PerturbKind,
}

/// One relabeled symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSwap {
    pub id: String,
    pub original_class: String,
    pub new_class: String,
}

/// The exact answer key of injected errors for one diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionLog {
    pub diagram_id: String,
    /// Symbol ids dropped from the detections (sorted).
    pub omitted: Vec<String>,
    /// Boxes resized or offset (sorted by symbol id).
    pub perturbed: Vec<PerturbedBox>,
    /// Detection ids of injected false positives.
    pub false_positives: Vec<String>,
    /// Symbols whose class label was swapped (sorted by symbol id).
    pub class_swapped: Vec<ClassSwap>,
}

impl InjectionLog {
    pub fn is_omitted(&self, symbol_id: &str) -> bool {
        self.omitted.binary_search_by(|s| s.as_str().cmp(symbol_id)).is_ok()
    }

    pub fn is_false_positive(&self, detection_id: &str) -> bool {
        self.false_positives.iter().any(|id| id == detection_id)
    }

    pub fn perturbation(&self, symbol_id: &str) -> Option<&PerturbedBox> {
        self.perturbed.iter().find(|p| p.id == symbol_id)
    }

    pub fn class_swap(&self, symbol_id: &str) -> Option<&ClassSwap> {
        self.class_swapped.iter().find(|s| s.id == symbol_id)
    }
}

/// Error-kind counts for one log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InjectionSummary {
    pub omitted: usize,
    pub resized: usize,
    pub offset: usize,
    pub class_swapped: usize,
    pub false_positives: usize,
}

/// Counts entries per error kind; sums match the log list lengths.
pub fn summarize_injection(log: &InjectionLog) -> InjectionSummary {
    InjectionSummary {
        omitted: log.omitted.len(),
        resized: log.perturbed.iter().filter(|p| p.kind == PerturbKind::Resize).count(),
        offset: log.perturbed.iter().filter(|p| p.kind == PerturbKind::Offset).count(),
        class_swapped: log.class_swapped.len(),
        false_positives: log.false_positives.len(),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorruptionError {
    #[error("invalid corruption spec: {0}")]
    InvalidSpec(String),
    #[error("diagram '{0}' has no symbols, cannot sample false-positive sizes")]
    NoSizeDistribution(String),
    #[error("diagram '{0}' needs at least 2 classes to swap labels")]
    NotEnoughClasses(String),
    #[error(
        "diagram '{diagram_id}': no false-positive placement with IoU < {FALSE_POSITIVE_MAX_IOU} \
         found after {FALSE_POSITIVE_MAX_ATTEMPTS} attempts"
    )]
    FalsePositivePlacement { diagram_id: String },
}

/// Turns ground truth into a corrupted detection set plus its answer key.
///
/// Deterministic for a fixed `(diagram, spec)`: the per-diagram substream is
/// keyed by `(spec.seed, diagram.id)`, so per-diagram corruption can run in
/// parallel without affecting results. `classes` is the dataset class list,
/// used for false-positive labels and class swaps.
pub fn inject_errors(
    diagram: &Diagram,
    classes: &[String],
    spec: &CorruptionSpec,
) -> Result<(DetectionSet, InjectionLog), CorruptionError> {
    spec.validate()?;
    let n = diagram.symbols.len();
    let n_fp = (spec.false_positive_rate * n as f64).floor() as usize;
    if n == 0 && spec.false_positive_rate > 0.0 {
        return Err(CorruptionError::NoSizeDistribution(diagram.id.clone()));
    }

    let mut rng = substream_rng(spec.seed, &format!("corrupt/{}", diagram.id));

    // Seeded shuffle of sorted symbol ids, then fixed-count slices:
    // [omitted | resized | offset | swapped | untouched].
    let mut order: Vec<&str> = diagram.symbols.iter().map(|s| s.id.as_str()).collect();
    order.sort_unstable();
    order.shuffle(&mut rng);

    let n_omit = (spec.omission_rate * n as f64).floor() as usize;
    let remaining = n - n_omit;
    let n_resize = (spec.resize_rate * remaining as f64).floor() as usize;
    let n_offset = (spec.offset_rate * remaining as f64).floor() as usize;
    let n_swap = (spec.class_swap_rate * remaining as f64).floor() as usize;
    debug_assert!(n_omit + n_resize + n_offset + n_swap <= n);

    if n_swap > 0 && classes.len() < 2 {
        return Err(CorruptionError::NotEnoughClasses(diagram.id.clone()));
    }

    let mut omitted: Vec<String> = order[..n_omit].iter().map(|s| s.to_string()).collect();
    let resize_ids = &order[n_omit..n_omit + n_resize];
    let offset_ids = &order[n_omit + n_resize..n_omit + n_resize + n_offset];
    let swap_ids = &order[n_omit + n_resize + n_offset..n_omit + n_resize + n_offset + n_swap];

    let mut perturbed: Vec<PerturbedBox> = Vec::with_capacity(n_resize + n_offset);
    for id in resize_ids {
        let symbol = diagram.symbol(id).expect("id from diagram");
        let fw = rng.random_range(1.0 - spec.resize_max_frac..=1.0 + spec.resize_max_frac);
        let fh = rng.random_range(1.0 - spec.resize_max_frac..=1.0 + spec.resize_max_frac);
        let corrupted = resize_box(&symbol.bbox, fw, fh, diagram.width, diagram.height);
        perturbed.push(PerturbedBox {
            id: id.to_string(),
            original: symbol.bbox,
            corrupted,
            kind: PerturbKind::Resize,
        });
    }
    for id in offset_ids {
        let symbol = diagram.symbol(id).expect("id from diagram");
        let max_dx = spec.offset_max_frac * symbol.bbox.w as f64;
        let max_dy = spec.offset_max_frac * symbol.bbox.h as f64;
        let dx = rng.random_range(-max_dx..=max_dx).round() as i64;
        let dy = rng.random_range(-max_dy..=max_dy).round() as i64;
        let corrupted = offset_box(&symbol.bbox, dx, dy, diagram.width, diagram.height);
        perturbed.push(PerturbedBox {
            id: id.to_string(),
            original: symbol.bbox,
            corrupted,
            kind: PerturbKind::Offset,
        });
    }

    let mut class_swapped: Vec<ClassSwap> = Vec::with_capacity(n_swap);
    for id in swap_ids {
        let symbol = diagram.symbol(id).expect("id from diagram");
        let others: Vec<&String> = classes.iter().filter(|c| **c != symbol.class_label).collect();
        let new_class = others[rng.random_range(0..others.len())].clone();
        class_swapped.push(ClassSwap {
            id: id.to_string(),
            original_class: symbol.class_label.clone(),
            new_class,
        });
    }

    // False positives: sizes from the empirical GT range, uniform in-bounds
    // positions, low overlap with every GT box.
    let mut false_positive_records: Vec<DetectionRecord> = Vec::with_capacity(n_fp);
    if n_fp > 0 {
        let (min_w, max_w, min_h, max_h) = size_range(diagram);
        for k in 0..n_fp {
            let mut placed = None;
            for _ in 0..FALSE_POSITIVE_MAX_ATTEMPTS {
                let w = rng.random_range(min_w..=max_w).min(diagram.width);
                let h = rng.random_range(min_h..=max_h).min(diagram.height);
                let x = rng.random_range(0..=diagram.width - w);
                let y = rng.random_range(0..=diagram.height - h);
                let candidate = BoundingBox { x, y, w, h };
                let clear = diagram
                    .symbols
                    .iter()
                    .all(|s| iou(&candidate, &s.bbox) < FALSE_POSITIVE_MAX_IOU);
                if clear {
                    placed = Some(candidate);
                    break;
                }
            }
            let bbox = placed
                .ok_or_else(|| CorruptionError::FalsePositivePlacement { diagram_id: diagram.id.clone() })?;
            let class_label = classes[rng.random_range(0..classes.len())].clone();
            let mut id = format!("fp_{k:04}");
            while diagram.symbol(&id).is_some() {
                id.push('x');
            }
            false_positive_records.push(DetectionRecord {
                id,
                class_label,
                bbox,
                score: 0.0, // assigned below with the rest
                provenance: Provenance::Base,
            });
        }
    }

    // Assemble detections in diagram symbol order, then false positives.
    let mut detections: Vec<DetectionRecord> = Vec::with_capacity(remaining + n_fp);
    for symbol in &diagram.symbols {
        if omitted.iter().any(|id| *id == symbol.id) {
            continue;
        }
        let bbox = perturbed
            .iter()
            .find(|p| p.id == symbol.id)
            .map(|p| p.corrupted)
            .unwrap_or(symbol.bbox);
        let class_label = class_swapped
            .iter()
            .find(|s| s.id == symbol.id)
            .map(|s| s.new_class.clone())
            .unwrap_or_else(|| symbol.class_label.clone());
        detections.push(DetectionRecord {
            id: symbol.id.clone(),
            class_label,
            bbox,
            score: 0.0,
            provenance: Provenance::Base,
        });
    }
    let false_positive_ids: Vec<String> =
        false_positive_records.iter().map(|d| d.id.clone()).collect();
    detections.extend(false_positive_records);
    for det in &mut detections {
        det.score = rng.random_range(0.5..1.0);
    }

    omitted.sort_unstable();
    perturbed.sort_by(|a, b| a.id.cmp(&b.id));
    class_swapped.sort_by(|a, b| a.id.cmp(&b.id));

    Ok((
        DetectionSet {
            diagram_id: diagram.id.clone(),
            detections,
        },
        InjectionLog {
            diagram_id: diagram.id.clone(),
            omitted,
            perturbed,
            false_positives: false_positive_ids,
            class_swapped,
        },
    ))
}

fn size_range(diagram: &Diagram) -> (u32, u32, u32, u32) {
    let mut min_w = u32::MAX;
    let mut max_w = 1;
    let mut min_h = u32::MAX;
    let mut max_h = 1;
    for s in &diagram.symbols {
        min_w = min_w.min(s.bbox.w.max(1));
        max_w = max_w.max(s.bbox.w);
        min_h = min_h.min(s.bbox.h.max(1));
        max_h = max_h.max(s.bbox.h);
    }
    (min_w, max_w, min_h, max_h)
}

fn resize_box(b: &BoundingBox, fw: f64, fh: f64, img_w: u32, img_h: u32) -> BoundingBox {
    // Anchored at the top-left corner; extent clamped to the image.
    let w = ((b.w as f64 * fw).round() as u32).max(1).min(img_w - b.x);
    let h = ((b.h as f64 * fh).round() as u32).max(1).min(img_h - b.y);
    BoundingBox { x: b.x, y: b.y, w, h }
}

fn offset_box(b: &BoundingBox, dx: i64, dy: i64, img_w: u32, img_h: u32) -> BoundingBox {
    let x = (b.x as i64 + dx).clamp(0, (img_w - b.w) as i64) as u32;
    let y = (b.y as i64 + dy).clamp(0, (img_h - b.h) as i64) as u32;
    BoundingBox { x, y, w: b.w, h: b.h }
}
