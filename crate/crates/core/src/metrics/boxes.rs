use super::Detection;
use crate::data::PixelBox;

/// Intersection over union with inclusive pixel areas.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let r0 = a.r0.max(b.r0);
    let c0 = a.c0.max(b.c0);
    let r1 = a.r1.min(b.r1);
    let c1 = a.c1.min(b.c1);
    let inter = if r0 <= r1 && c0 <= c1 { (r1 - r0 + 1) * (c1 - c0 + 1) } else { 0 };
    inter as f64 / (a.area() + b.area() - inter) as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Size of a maximum one-to-one matching where prediction `p` may pair with
/// truth `t` when `edges[p][t]`. Predictions are offered in the given order
/// and augmenting paths let a later prediction displace an earlier one only
/// if the earlier one can be re-matched.
pub fn max_matching(edges: &[Vec<bool>], num_truths: usize) -> usize {
    fn augment(p: usize, edges: &[Vec<bool>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for t in 0..owner.len() {
            if edges[p][t] && !seen[t] {
                seen[t] = true;
                if owner[t].map_or(true, |q| augment(q, edges, seen, owner)) {
                    owner[t] = Some(p);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; num_truths];
    let mut matched = 0;
    for p in 0..edges.len() {
        let mut seen = vec![false; num_truths];
        if augment(p, edges, &mut seen, &mut owner) {
            matched += 1;
        }
    }
    matched
}

/// One-to-one matching of one class's predictions to its truths in one
/// image, taking predictions by descending score; IoU at least `thr`
/// counts as a match.
pub fn match_counts(preds: &[Detection], truths: &[PixelBox], thr: f64) -> MatchCounts {
    let mut order: Vec<&Detection> = preds.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let edges: Vec<Vec<bool>> = order
        .iter()
        .map(|d| truths.iter().map(|t| iou(&d.bbox, t) >= thr).collect())
        .collect();
    let tp = max_matching(&edges, truths.len());
    MatchCounts {
        tp,
        fp: preds.len() - tp,
        fn_: truths.len() - tp,
    }
}

/// Set-level `TP / (TP + FP + FN)` over `(predictions, truths)` groups, one
/// group per image and class. With nothing predicted and nothing to find the
/// score is 1.
pub fn average_precision(groups: &[(Vec<Detection>, Vec<PixelBox>)], thr: f64) -> f64 {
    let mut c = MatchCounts::default();
    for (p, t) in groups {
        c += match_counts(p, t, thr);
    }
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}
