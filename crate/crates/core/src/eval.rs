//! Detection and proposal metrics: greedy matching, all-points AP,
//! per-state and weighted mAP, size-binned mAP and average recall.

use std::fmt::Write as _;

use serde::Serialize;

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::{iou, size_bin, size_bin_of_box, Annotation, BBox, SizeBin, StateVocabulary};
use crate::scalar::Real;

pub const DEFAULT_IOU: f64 = 0.5;
pub const DEFAULT_BUDGETS: [usize; 2] = [1000, 5000];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub true_positive: Vec<bool>,
    pub matched: Vec<Option<usize>>,
    /// Per annotation.
    pub annotation_matched: Vec<bool>,
}

/// Greedy matching of detections (already in descending confidence) to
/// annotations of the same class: each detection takes the unmatched
/// annotation of highest IoU if that IoU reaches `threshold`.
pub fn greedy_match<T: Real>(detections: &[BBox<T>], annotations: &[BBox<T>], threshold: f64) -> MatchResult {
    let thr = T::lit(threshold);
    let mut annotation_matched = vec![false; annotations.len()];
    let mut matched = Vec::with_capacity(detections.len());
    for d in detections {
        let mut best: Option<(T, usize)> = None;
        for (k, a) in annotations.iter().enumerate() {
            if annotation_matched[k] {
                continue;
            }
            let v = iou(d, a);
            if v >= thr && best.map_or(true, |(b, _)| v > b) {
                best = Some((v, k));
            }
        }
        if let Some((_, k)) = best {
            annotation_matched[k] = true;
        }
        matched.push(best.map(|(_, k)| k));
    }
    MatchResult { true_positive: matched.iter().map(Option::is_some).collect(), matched, annotation_matched }
}

/// `(recall, precision)` after each detection of a ranked flag sequence.
pub fn pr_curve(flags: &[bool], n_annotations: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += usize::from(f);
            let recall = if n_annotations == 0 { 0.0 } else { tp as f64 / n_annotations as f64 };
            (recall, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Area under the monotone-interpolated precision/recall curve.
pub fn average_precision(flags: &[bool], n_annotations: usize) -> f64 {
    if n_annotations == 0 || flags.is_empty() {
        return 0.0;
    }
    let curve = pr_curve(flags, n_annotations);
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(r, _), &p) in curve.iter().zip(&envelope) {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    ap
}

/// One image's ground truth and detections.
#[derive(Debug, Clone, Copy)]
pub struct EvalImage<'a, T> {
    pub width: u32,
    pub height: u32,
    pub annotations: &'a [Annotation<T>],
    pub detections: &'a [Detection<T>],
}

/// Ranked TP flags over all images for one class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassFlags {
    pub flags: Vec<bool>,
    pub annotations: usize,
}

impl ClassFlags {
    pub fn ap(&self) -> f64 {
        average_precision(&self.flags, self.annotations)
    }

    pub fn detections(&self) -> usize {
        self.flags.len()
    }

    /// Included in a mean when anything of this class was annotated or
    /// predicted.
    pub fn counts_toward_mean(&self) -> bool {
        self.annotations > 0 || !self.flags.is_empty()
    }
}

fn sorted_by_confidence<T: Real>(dets: &[&Detection<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).expect("finite confidence"));
    order
}

/// Flags of one state over all images, optionally restricted to a size bin.
fn class_flags<T: Real>(
    images: &[EvalImage<'_, T>],
    state: usize,
    threshold: f64,
    bin: Option<SizeBin>,
) -> ClassFlags {
    let mut scored: Vec<(T, usize, usize, bool)> = Vec::new();
    let mut total = 0;
    for (img_idx, img) in images.iter().enumerate() {
        let same: Vec<&Annotation<T>> = img.annotations.iter().filter(|a| a.state == state).collect();
        let in_bin = |a: &Annotation<T>| bin.map_or(true, |b| size_bin(a, img.width, img.height) == b);
        let gt: Vec<BBox<T>> = same.iter().filter(|a| in_bin(a)).map(|a| a.bbox).collect();
        total += gt.len();
        let dets: Vec<&Detection<T>> = img.detections.iter().filter(|d| d.state == state).collect();
        let order = sorted_by_confidence(&dets);
        let kept: Vec<usize> = order
            .into_iter()
            .filter(|&i| match bin {
                None => true,
                Some(b) => {
                    let d = dets[i];
                    let best = same
                        .iter()
                        .map(|a| (iou(&d.bbox, &a.bbox), *a))
                        .fold(None::<(T, &Annotation<T>)>, |acc, (v, a)| match acc {
                            Some((bv, _)) if bv >= v => acc,
                            _ => Some((v, a)),
                        });
                    match best {
                        Some((v, a)) if v >= T::lit(threshold) => size_bin(a, img.width, img.height) == b,
                        _ => size_bin_of_box(&d.bbox, img.width, img.height) == b,
                    }
                }
            })
            .collect();
        let boxes: Vec<BBox<T>> = kept.iter().map(|&i| dets[i].bbox).collect();
        let m = greedy_match(&boxes, &gt, threshold);
        for (rank, (&i, &tp)) in kept.iter().zip(&m.true_positive).enumerate() {
            scored.push((dets[i].confidence, img_idx, rank, tp));
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite confidence").then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    ClassFlags { flags: scored.into_iter().map(|s| s.3).collect(), annotations: total }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateMap {
    pub classes: Vec<ClassFlags>,
    /// Per state AP, `None` for states left out of the mean.
    pub ap: Vec<Option<f64>>,
    pub map: f64,
}

fn mean_of(classes: Vec<ClassFlags>) -> StateMap {
    let ap: Vec<Option<f64>> = classes.iter().map(|c| c.counts_toward_mean().then(|| c.ap())).collect();
    let present: Vec<f64> = ap.iter().flatten().copied().collect();
    let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    StateMap { classes, ap, map }
}

pub fn map_by_state<T: Real>(images: &[EvalImage<'_, T>], states: usize, threshold: f64) -> StateMap {
    mean_of((0..states).map(|s| class_flags(images, s, threshold, None)).collect())
}

/// `Σ count·AP / Σ count`.
pub fn map_weighted(aps: &[f64], counts: &[usize]) -> Result<f64> {
    if aps.len() != counts.len() {
        return Err(Error::Config("one annotation count per state is required".into()));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Config("weighted mAP is undefined without annotations".into()));
    }
    Ok(aps.iter().zip(counts).map(|(a, &c)| a * c as f64).sum::<f64>() / total as f64)
}

/// mAP restricted to each size bin, `None` for bins without annotations.
/// Detections whose best same-state match lies in another bin are ignored;
/// unmatched detections count against the bin of their own box.
pub fn map_by_size<T: Real>(images: &[EvalImage<'_, T>], states: usize, threshold: f64) -> [Option<f64>; 4] {
    SizeBin::ALL.map(|bin| {
        let sm = mean_of((0..states).map(|s| class_flags(images, s, threshold, Some(bin))).collect());
        let annotated: usize = sm.classes.iter().map(|c| c.annotations).sum();
        (annotated > 0).then_some(sm.map)
    })
}

pub fn ar_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (10 + i) as f64 / 20.0)
}

/// Fraction of annotations recalled by the top-`budget` proposals of
/// their image, averaged over IoU thresholds 0.50, 0.55, …, 0.95.
pub fn average_recall<T: Real>(proposals: &[Vec<BBox<T>>], annotations: &[&[Annotation<T>]], budget: usize) -> Result<f64> {
    if proposals.len() != annotations.len() {
        return Err(Error::Config("proposal and annotation lists cover different images".into()));
    }
    let mut best = Vec::new();
    for (props, anns) in proposals.iter().zip(annotations) {
        let kept = &props[..props.len().min(budget)];
        for a in anns.iter() {
            best.push(kept.iter().map(|p| iou(p, &a.bbox).as_f64()).fold(0.0, f64::max));
        }
    }
    if best.is_empty() {
        return Ok(0.0);
    }
    let thresholds = ar_thresholds();
    let recalled: usize = thresholds.iter().map(|&t| best.iter().filter(|&&v| v >= t).count()).sum();
    Ok(recalled as f64 / (best.len() * thresholds.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateReport {
    pub state: String,
    pub ap: Option<f64>,
    pub annotations: usize,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeReport {
    pub bin: String,
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallReport {
    pub budget: usize,
    pub ar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub images: usize,
    pub states: Vec<StateReport>,
    pub map: f64,
    pub map_weighted: f64,
    pub size: Vec<SizeReport>,
    pub recall: Vec<RecallReport>,
    #[serde(skip)]
    pub pr_curves: Vec<Vec<(f64, f64)>>,
}

/// Full protocol over a test split. `proposals`, when given, holds the
/// ranked proposal boxes of every image for the AR budgets.
pub fn evaluate<T: Real>(
    images: &[EvalImage<'_, T>],
    proposals: Option<&[Vec<BBox<T>>]>,
    vocab: &StateVocabulary,
    budgets: &[usize],
    threshold: f64,
) -> Result<EvalReport> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("IoU threshold {threshold} must lie in (0, 1]")));
    }
    for img in images {
        let mut states = img.annotations.iter().map(|a| a.state).chain(img.detections.iter().map(|d| d.state));
        if states.any(|s| s >= vocab.len()) {
            return Err(Error::Config("state index outside the vocabulary".into()));
        }
    }
    let by_state = map_by_state(images, vocab.len(), threshold);
    let counts: Vec<usize> = by_state.classes.iter().map(|c| c.annotations).collect();
    let aps: Vec<f64> = by_state.ap.iter().map(|a| a.unwrap_or(0.0)).collect();
    let map_weighted = map_weighted(&aps, &counts)?;
    let size = map_by_size(images, vocab.len(), threshold);
    let mut recall = Vec::new();
    if let Some(props) = proposals {
        let anns: Vec<&[Annotation<T>]> = images.iter().map(|i| i.annotations).collect();
        for &b in budgets {
            recall.push(RecallReport { budget: b, ar: average_recall(props, &anns, b)? });
        }
    }
    Ok(EvalReport {
        iou_threshold: threshold,
        images: images.len(),
        states: vocab
            .names()
            .iter()
            .zip(&by_state.classes)
            .zip(&by_state.ap)
            .map(|((name, c), ap)| StateReport {
                state: name.clone(),
                ap: *ap,
                annotations: c.annotations,
                detections: c.detections(),
            })
            .collect(),
        map: by_state.map,
        map_weighted,
        size: SizeBin::ALL.iter().zip(size).map(|(b, m)| SizeReport { bin: b.name().into(), map: m }).collect(),
        recall,
        pr_curves: by_state.classes.iter().map(|c| pr_curve(&c.flags, c.annotations)).collect(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>8} {:>12} {:>11}", "state", "AP", "annotations", "detections");
        for st in &self.states {
            let _ = writeln!(s, "{:<12} {:>8} {:>12} {:>11}", st.state, fmt_opt(st.ap), st.annotations, st.detections);
        }
        let _ = writeln!(s, "{:<12} {:>8.4}", "mAP", self.map);
        let _ = writeln!(s, "{:<12} {:>8.4}", "mAP_weighted", self.map_weighted);
        for b in &self.size {
            let _ = writeln!(s, "{:<12} {:>8}", format!("mAP_{}", b.bin), fmt_opt(b.map));
        }
        for r in &self.recall {
            let _ = writeln!(s, "{:<12} {:>8.4}", format!("AR@{}", r.budget), r.ar);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map(|s| s + "\n").map_err(|e| Error::Config(e.to_string()))
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("state,rank,recall,precision\n");
        for (st, curve) in self.states.iter().zip(&self.pr_curves) {
            for (i, (r, p)) in curve.iter().enumerate() {
                let _ = writeln!(s, "{},{},{r},{p}", st.state, i + 1);
            }
        }
        s
    }

    /// One precision/recall polyline per state on a unit square.
    pub fn pr_svg(&self) -> String {
        const SIZE: f64 = 400.0;
        const PAD: f64 = 40.0;
        const COLORS: [&str; 6] = ["#d62728", "#ff7f0e", "#2ca02c", "#7f7f7f", "#1f77b4", "#9467bd"];
        let full = SIZE + 2.0 * PAD;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" viewBox="0 0 {full} {full}">"#);
        let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">recall</text>"#, PAD + SIZE / 2.0, full - 10.0);
        let _ = writeln!(s, r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">precision</text>"#, PAD + SIZE / 2.0, PAD + SIZE / 2.0);
        for (k, (st, curve)) in self.states.iter().zip(&self.pr_curves).enumerate() {
            let color = COLORS[k % COLORS.len()];
            let points: Vec<String> = curve
                .iter()
                .map(|&(r, p)| format!("{:.2},{:.2}", PAD + r * SIZE, PAD + (1.0 - p) * SIZE))
                .collect();
            if !points.is_empty() {
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" "));
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="12" fill="{color}">{} AP {}</text>"#,
                PAD + 8.0,
                PAD + 16.0 + 14.0 * k as f64,
                st.state,
                fmt_opt(st.ap)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox<f64> {
        BBox::from_f64(x0, y0, x1, y1)
    }

    fn det(b: BBox<f64>, state: usize, confidence: f64) -> Detection<f64> {
        Detection { bbox: b, state, confidence }
    }

    /// AP as the mean, over annotations, of the best precision at any cut
    /// point whose recall reaches that annotation's rank.
    fn ap_oracle(flags: &[bool], n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        let mut points = Vec::new();
        for cut in 1..=flags.len() {
            let tp = flags[..cut].iter().filter(|&&f| f).count();
            points.push((tp, tp as f64 / cut as f64));
        }
        (1..=n).map(|k| points.iter().filter(|&&(tp, _)| tp >= k).map(|&(_, p)| p).fold(0.0, f64::max)).sum::<f64>() / n as f64
    }

    #[test]
    fn ap_matches_oracle_exhaustively() {
        for len in 0..=12usize {
            for bits in 0u32..(1 << len) {
                let flags: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
                let tp = flags.iter().filter(|&&f| f).count();
                for n in [tp, tp + 1, tp + 3] {
                    let (a, o) = (average_precision(&flags, n), ap_oracle(&flags, n));
                    assert!((a - o).abs() <= 1e-9, "{flags:?} n={n}: {a} vs {o}");
                }
            }
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert!((average_precision(&[false, true], 1) - 0.5).abs() < 1e-12);
        assert_eq!(average_precision(&[], 3), 0.0);
        assert_eq!(average_precision(&[false, false], 0), 0.0);
    }

    proptest! {
        #[test]
        fn appending_fp_never_raises_ap(flags in proptest::collection::vec(any::<bool>(), 0..40), extra in 0usize..4) {
            let n = flags.iter().filter(|&&f| f).count() + extra;
            let mut longer = flags.clone();
            longer.push(false);
            prop_assert!(average_precision(&longer, n) <= average_precision(&flags, n) + 1e-12);
            let before = pr_curve(&flags, n);
            let after = pr_curve(&longer, n);
            prop_assert_eq!(&after[..before.len()], &before[..]);
            let v = average_precision(&flags, n);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn ar_grows_with_budget(
            props in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0, 1.0f64..40.0), 0..60),
            gts in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0, 1.0f64..40.0), 0..6),
            k in 0usize..60,
        ) {
            let p: Vec<_> = props.iter().map(|&(x, y, s)| bx(x, y, x + s, y + s)).collect();
            let a: Vec<_> = gts.iter().map(|&(x, y, s)| Annotation { bbox: bx(x, y, x + s, y + s), state: 0 }).collect();
            let lo = average_recall(&[p.clone()], &[&a], k).unwrap();
            let hi = average_recall(&[p], &[&a], k + 5).unwrap();
            prop_assert!(lo <= hi && (0.0..=1.0).contains(&lo) && hi <= 1.0);
        }
    }

    #[test]
    fn matching_examples() {
        let gt = [bx(0.0, 0.0, 10.0, 10.0)];
        // IoU 75 / 125 = 0.6
        let m = greedy_match(&[bx(2.5, 0.0, 12.5, 10.0)], &gt, 0.5);
        assert_eq!(m.true_positive, vec![true]);
        let m = greedy_match(&[bx(0.0, 0.0, 10.0, 10.0), bx(1.0, 0.0, 11.0, 10.0)], &gt, 0.5);
        assert_eq!(m.true_positive, vec![true, false]);
        assert_eq!(m.annotation_matched, vec![true]);
        // IoU 60 / 140 ≈ 0.43
        assert_eq!(greedy_match(&[bx(4.0, 0.0, 14.0, 10.0)], &gt, 0.5).true_positive, vec![false]);
        // exactly 0.5: 100 / 200 with a box twice the size
        assert_eq!(greedy_match(&[bx(0.0, 0.0, 20.0, 10.0)], &gt, 0.5).true_positive, vec![true]);
        // second detection falls back to the remaining annotation
        let two = [bx(0.0, 0.0, 10.0, 10.0), bx(2.0, 0.0, 12.0, 10.0)];
        let m = greedy_match(&[bx(1.0, 0.0, 11.0, 10.0), bx(1.0, 0.0, 11.0, 10.0)], &two, 0.5);
        assert_eq!(m.matched, vec![Some(0), Some(1)]);
    }

    #[test]
    fn state_means() {
        let anns = [Annotation { bbox: bx(0.0, 0.0, 10.0, 10.0), state: 0 }];
        let dets = [det(bx(0.0, 0.0, 10.0, 10.0), 0, 0.9)];
        let img = [EvalImage { width: 100, height: 100, annotations: &anns, detections: &dets }];
        let sm = map_by_state(&img, 4, 0.5);
        assert_eq!(sm.map, 1.0);
        assert_eq!(sm.ap, vec![Some(1.0), None, None, None]);
        // hallucinated state 2 enters the mean with AP 0
        let dets2 = [dets[0].clone(), det(bx(50.0, 50.0, 60.0, 60.0), 2, 0.8)];
        let img = [EvalImage { width: 100, height: 100, annotations: &anns, detections: &dets2 }];
        let sm = map_by_state(&img, 4, 0.5);
        assert_eq!(sm.ap, vec![Some(1.0), None, Some(0.0), None]);
        assert_eq!(sm.map, 0.5);
    }

    #[test]
    fn weighted_examples() {
        assert!((map_weighted(&[0.8, 0.4], &[3, 1]).unwrap() - 0.7).abs() < 1e-12);
        assert!((map_weighted(&[0.8, 0.4], &[2, 2]).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(map_weighted(&[0.3], &[5]).unwrap(), 0.3);
        assert!(map_weighted(&[0.3, 0.1], &[0, 0]).is_err());
    }

    #[test]
    fn recall_examples() {
        let anns = [Annotation { bbox: bx(0.0, 0.0, 10.0, 10.0), state: 0 }, Annotation { bbox: bx(20.0, 20.0, 30.0, 30.0), state: 1 }];
        let exact: Vec<_> = anns.iter().map(|a| a.bbox).collect();
        assert_eq!(average_recall(&[exact], &[&anns], 1000).unwrap(), 1.0);
        assert_eq!(average_recall(&[vec![]], &[&anns], 1000).unwrap(), 0.0);
        // IoU 0.6 (75 / 125) passes 0.50, 0.55, 0.60
        let one = [anns[0].clone()];
        assert!((average_recall(&[vec![bx(2.5, 0.0, 12.5, 10.0)]], &[&one], 1000).unwrap() - 0.3).abs() < 1e-12);
        // budget cuts the second, perfect proposal
        let ranked = vec![bx(50.0, 50.0, 60.0, 60.0), anns[0].bbox];
        assert_eq!(average_recall(&[ranked.clone()], &[&one], 1).unwrap(), 0.0);
        assert_eq!(average_recall(&[ranked], &[&one], 2).unwrap(), 1.0);
    }

    /// 1000 × 1000 image: relative-area bins at 100 / 300 / 500 px².
    fn mixed_fixture() -> (Vec<Annotation<f64>>, Vec<Detection<f64>>) {
        let sq = |x: f64, y: f64, s: f64| bx(x, y, x + s, y + s);
        let anns = vec![
            Annotation { bbox: sq(0.0, 0.0, 8.0), state: 0 },     // tiny
            Annotation { bbox: sq(100.0, 0.0, 9.0), state: 0 },   // tiny
            Annotation { bbox: sq(200.0, 0.0, 15.0), state: 0 },  // small
            Annotation { bbox: sq(300.0, 0.0, 20.0), state: 1 },  // medium
            Annotation { bbox: sq(400.0, 0.0, 40.0), state: 1 },  // large
            Annotation { bbox: sq(500.0, 0.0, 50.0), state: 0 },  // large
        ];
        let dets = vec![
            det(sq(0.0, 0.0, 8.0), 0, 0.95),
            det(sq(500.0, 0.0, 50.0), 0, 0.9),
            det(sq(700.0, 700.0, 9.0), 0, 0.85), // unmatched, tiny-sized
            det(sq(200.0, 0.0, 15.0), 0, 0.8),
            det(sq(400.0, 0.0, 40.0), 1, 0.7),
            det(sq(300.0, 0.0, 20.0), 0, 0.65), // wrong state, medium-sized
            det(sq(100.0, 0.0, 9.0), 0, 0.6),
            det(sq(800.0, 800.0, 45.0), 1, 0.5), // unmatched, large-sized
        ];
        (anns, dets)
    }

    /// Per bin: enumerate every (detection, annotation) pair by hand rule
    /// and build the flag lists directly for this duplicate-free fixture.
    fn size_oracle(anns: &[Annotation<f64>], dets: &[Detection<f64>], w: u32, h: u32) -> [Option<f64>; 4] {
        SizeBin::ALL.map(|bin| {
            let mut aps = Vec::new();
            let mut annotated = 0;
            for s in 0..2 {
                let n = anns.iter().filter(|a| a.state == s && size_bin(a, w, h) == bin).count();
                annotated += n;
                let mut flags = Vec::new();
                for d in dets.iter().filter(|d| d.state == s) {
                    let hit = anns.iter().find(|a| a.state == s && iou(&d.bbox, &a.bbox) >= 0.5);
                    let home = hit.map_or(size_bin_of_box(&d.bbox, w, h), |a| size_bin(a, w, h));
                    if home == bin {
                        flags.push(hit.is_some());
                    }
                }
                if n > 0 || !flags.is_empty() {
                    aps.push(ap_oracle(&flags, n));
                }
            }
            (annotated > 0).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
        })
    }

    #[test]
    fn size_bins_match_enumeration() {
        let (anns, dets) = mixed_fixture();
        let bins: Vec<SizeBin> = anns.iter().map(|a| size_bin(a, 1000, 1000)).collect();
        assert_eq!(bins, [SizeBin::Tiny, SizeBin::Tiny, SizeBin::Small, SizeBin::Medium, SizeBin::Large, SizeBin::Large]);
        let img = [EvalImage { width: 1000, height: 1000, annotations: &anns, detections: &dets }];
        let got = map_by_size(&img, 2, 0.5);
        let want = size_oracle(&anns, &dets, 1000, 1000);
        for (g, w) in got.iter().zip(&want) {
            match (g, w) {
                (Some(g), Some(w)) => assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}"),
                _ => assert_eq!(g, w),
            }
        }
        // tiny: state 0 sees TP, FP, TP over 2 annotations
        assert!((got[0].unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        // the large-object detection contributes nothing to tiny
        let only_large = [dets[1].clone()];
        let img = [EvalImage { width: 1000, height: 1000, annotations: &anns, detections: &only_large }];
        assert_eq!(map_by_size(&img, 2, 0.5)[0], Some(0.0));
        assert_eq!(class_flags(&img, 0, 0.5, Some(SizeBin::Tiny)).flags, Vec::<bool>::new());
    }

    #[test]
    fn single_bin_matches_overall() {
        let anns = [Annotation { bbox: bx(0.0, 0.0, 60.0, 60.0), state: 0 }, Annotation { bbox: bx(100.0, 100.0, 150.0, 150.0), state: 1 }];
        let dets = [det(anns[0].bbox, 0, 0.9), det(bx(300.0, 300.0, 360.0, 360.0), 1, 0.8), det(anns[1].bbox, 1, 0.3)];
        let img = [EvalImage { width: 1000, height: 1000, annotations: &anns, detections: &dets }];
        let size = map_by_size(&img, 2, 0.5);
        assert_eq!(size[..3], [None, None, None]);
        assert!((size[3].unwrap() - map_by_state(&img, 2, 0.5).map).abs() < 1e-12);
    }

    #[test]
    fn report_is_bounded_and_serializes() {
        let (anns, dets) = mixed_fixture();
        let img = [EvalImage { width: 1000, height: 1000, annotations: &anns, detections: &dets }];
        let vocab = StateVocabulary::new(["stop", "go"]).unwrap();
        let props = vec![dets.iter().map(|d| d.bbox).collect::<Vec<_>>()];
        let r = evaluate(&img, Some(&props), &vocab, &DEFAULT_BUDGETS, 0.5).unwrap();
        let values = [r.map, r.map_weighted].into_iter().chain(r.states.iter().filter_map(|s| s.ap)).chain(r.size.iter().filter_map(|s| s.map)).chain(r.recall.iter().map(|x| x.ar));
        for v in values {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(r.recall.len(), 2);
        assert!(r.to_json().unwrap().contains("\"map_weighted\""));
        assert!(r.to_table().contains("mAP_tiny"));
        assert!(r.pr_csv().lines().count() > 1);
        assert!(r.pr_svg().starts_with("<svg"));
        assert!(evaluate(&img, None, &vocab, &[], 0.0).is_err());
    }
}
