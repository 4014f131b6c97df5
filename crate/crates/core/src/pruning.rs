//! Proposal pruning: greedy 3D NMS followed by cluster-level majority
//! relabeling.
//!
//! Each suppressed proposal joins the cluster of the kept proposal that
//! suppressed it. The kept proposal's class then becomes the weighted mode
//! of its cluster, which fixes the common segmenter failure where several
//! overlapping masks disagree on the label and the most confident one is
//! wrong.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{aabb_iou, ObjectProposal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteWeighting {
    Count,
    #[default]
    Confidence,
}

impl std::str::FromStr for VoteWeighting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "count" => Ok(VoteWeighting::Count),
            "confidence" => Ok(VoteWeighting::Confidence),
            other => Err(format!("unknown vote weighting '{other}' (expected count|confidence)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub iou_threshold: f64,
    pub vote_weighting: VoteWeighting,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5, vote_weighting: VoteWeighting::Confidence }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("IoU threshold {0} outside (0, 1]")]
pub struct ThresholdError(pub f64);

impl PruneConfig {
    pub fn new(iou_threshold: f64, vote_weighting: VoteWeighting) -> Result<Self, ThresholdError> {
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            return Err(ThresholdError(iou_threshold));
        }
        Ok(Self { iou_threshold, vote_weighting })
    }
}

/// Result of greedy NMS. `kept`, `kept_source` and `clusters` are parallel;
/// kept proposals appear in selection order (descending confidence).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NmsOutcome {
    pub kept: Vec<ObjectProposal>,
    /// Input index of each kept proposal.
    pub kept_source: Vec<usize>,
    /// Suppressed proposals with their input indices.
    pub clusters: Vec<Vec<(usize, ObjectProposal)>>,
}

/// Selection order: descending confidence, ties by ascending input index.
pub fn selection_order(proposals: &[ObjectProposal]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .confidence
            .partial_cmp(&proposals[a].confidence)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

pub fn nms_prune(proposals: &[ObjectProposal], config: &PruneConfig) -> NmsOutcome {
    let order = selection_order(proposals);
    // owner[i] = position in `kept` of the proposal that suppressed i
    let mut owner: Vec<Option<usize>> = vec![None; proposals.len()];
    let mut out = NmsOutcome::default();
    for (rank, &i) in order.iter().enumerate() {
        if owner[i].is_some() {
            continue;
        }
        let slot = out.kept.len();
        owner[i] = Some(slot);
        out.kept.push(proposals[i].clone());
        out.kept_source.push(i);
        let mut cluster = Vec::new();
        for &j in &order[rank + 1..] {
            if owner[j].is_none() && aabb_iou(&proposals[i].bbox, &proposals[j].bbox) > config.iou_threshold {
                owner[j] = Some(slot);
                cluster.push((j, proposals[j].clone()));
            }
        }
        out.clusters.push(cluster);
    }
    out
}

/// Replace each kept label with the weighted mode over the kept proposal
/// and its cluster. A tie that includes the kept proposal's own label keeps
/// it; other ties resolve to the lexicographically smallest label.
pub fn majority_relabel(outcome: &NmsOutcome, config: &PruneConfig) -> Vec<ObjectProposal> {
    let weight = |p: &ObjectProposal| match config.vote_weighting {
        VoteWeighting::Count => 1.0,
        VoteWeighting::Confidence => p.confidence,
    };
    outcome
        .kept
        .iter()
        .zip(&outcome.clusters)
        .map(|(kept, cluster)| {
            let mut votes: BTreeMap<&str, f64> = BTreeMap::new();
            *votes.entry(kept.class_label.as_str()).or_default() += weight(kept);
            for (_, p) in cluster {
                *votes.entry(p.class_label.as_str()).or_default() += weight(p);
            }
            let best = votes.values().cloned().fold(f64::NEG_INFINITY, f64::max);
            let tied = |w: f64| (best - w).abs() <= 1e-12 * best.abs().max(1.0);
            let label = if tied(votes[kept.class_label.as_str()]) {
                kept.class_label.as_str()
            } else {
                // BTreeMap iterates in label order, so the first tied entry wins.
                votes.iter().find(|(_, &w)| tied(w)).map(|(l, _)| *l).unwrap()
            };
            ObjectProposal { class_label: label.to_string(), ..kept.clone() }
        })
        .collect()
}

/// NMS followed by relabeling.
pub fn prune(proposals: &[ObjectProposal], config: &PruneConfig) -> Vec<ObjectProposal> {
    majority_relabel(&nms_prune(proposals, config), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb3;
    use proptest::prelude::*;

    fn prop(label: &str, min: [f64; 3], max: [f64; 3], c: f64) -> ObjectProposal {
        ObjectProposal::new(label, Aabb3::new(min.into(), max.into()).unwrap(), c).unwrap()
    }

    #[test]
    fn identical_boxes() {
        let ps = vec![prop("chair", [0.0; 3], [1.0; 3], 0.9), prop("chair", [0.0; 3], [1.0; 3], 0.8)];
        let out = nms_prune(&ps, &PruneConfig::default());
        assert_eq!(out.kept_source, vec![0]);
        assert_eq!(out.clusters[0].len(), 1);
        assert_eq!(out.clusters[0][0].0, 1);
    }

    #[test]
    fn disjoint_boxes() {
        let ps = vec![prop("a", [0.0; 3], [1.0; 3], 0.9), prop("b", [2.0; 3], [3.0; 3], 0.8)];
        let out = nms_prune(&ps, &PruneConfig::default());
        assert_eq!(out.kept.len(), 2);
        assert!(out.clusters.iter().all(Vec::is_empty));
    }

    #[test]
    fn chain_of_three() {
        // B overlaps A and C equally while A and C only touch. Two IoUs above
        // 0.5 cannot share one box when A and C are disjoint, so the chain
        // uses IoU 1/3 against a 0.3 threshold.
        let a = prop("a", [0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.9);
        let b = prop("b", [0.5, 0.0, 0.0], [1.5, 1.0, 1.0], 0.8);
        let c = prop("c", [1.0, 0.0, 0.0], [2.0, 1.0, 1.0], 0.7);
        assert!((aabb_iou(&a.bbox, &b.bbox) - 1.0 / 3.0).abs() < 1e-12);
        assert!((aabb_iou(&b.bbox, &c.bbox) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(aabb_iou(&a.bbox, &c.bbox), 0.0);
        let out = nms_prune(&[a, b, c], &PruneConfig::new(0.3, VoteWeighting::Confidence).unwrap());
        assert_eq!(out.kept_source, vec![0, 2]);
        assert_eq!(out.clusters[0].iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![1]);
        assert!(out.clusters[1].is_empty());
    }

    #[test]
    fn relabel_examples() {
        let cfg = PruneConfig::default();
        let chair = NmsOutcome {
            kept: vec![prop("chair", [0.0; 3], [1.0; 3], 0.9)],
            kept_source: vec![0],
            clusters: vec![vec![(1, prop("chair", [0.0; 3], [1.0; 3], 0.8))]],
        };
        assert_eq!(majority_relabel(&chair, &cfg)[0].class_label, "chair");

        let sofa = NmsOutcome {
            kept: vec![prop("sofa", [0.0; 3], [1.0; 3], 0.6)],
            kept_source: vec![0],
            clusters: vec![vec![(1, prop("couch", [0.0; 3], [1.0; 3], 0.5)), (2, prop("couch", [0.0; 3], [1.0; 3], 0.4))]],
        };
        let relabeled = majority_relabel(&sofa, &cfg);
        assert_eq!(relabeled[0].class_label, "couch");
        assert_eq!(relabeled[0].confidence, 0.6);

        let tie = NmsOutcome {
            kept: vec![prop("table", [0.0; 3], [1.0; 3], 0.5)],
            kept_source: vec![0],
            clusters: vec![vec![(1, prop("desk", [0.0; 3], [1.0; 3], 0.5))]],
        };
        let count = PruneConfig::new(0.5, VoteWeighting::Count).unwrap();
        assert_eq!(majority_relabel(&tie, &count)[0].class_label, "table");
    }

    #[test]
    fn threshold_validation() {
        assert!(PruneConfig::new(0.0, VoteWeighting::Count).is_err());
        assert!(PruneConfig::new(1.0, VoteWeighting::Count).is_ok());
        assert!(PruneConfig::new(f64::NAN, VoteWeighting::Count).is_err());
        assert_eq!("count".parse::<VoteWeighting>(), Ok(VoteWeighting::Count));
    }

    #[test]
    fn empty_input() {
        let out = nms_prune(&[], &PruneConfig::default());
        assert!(out.kept.is_empty() && out.clusters.is_empty());
    }

    const LABELS: [&str; 3] = ["chair", "desk", "table"];

    /// Boxes on a coarse lattice so that overlaps are common.
    fn arb_box() -> impl Strategy<Value = Aabb3> {
        (prop::array::uniform3(0u8..4), prop::array::uniform3(1u8..4)).prop_map(|(lo, size)| {
            let min = lo.map(|v| v as f64 * 0.5);
            let max = [min[0] + size[0] as f64 * 0.5, min[1] + size[1] as f64 * 0.5, min[2] + size[2] as f64 * 0.5];
            Aabb3::new(min.into(), max.into()).unwrap()
        })
    }

    /// Proposals with confidences drawn from a few values, so ties occur.
    fn arb_proposals() -> impl Strategy<Value = Vec<ObjectProposal>> {
        prop::collection::vec((0..LABELS.len(), arb_box(), 1u8..5), 0..20).prop_map(|v| {
            v.into_iter().map(|(l, b, c)| ObjectProposal::new(LABELS[l], b, c as f64 / 4.0).unwrap()).collect()
        })
    }

    /// Proposals with pairwise distinct confidences.
    fn arb_distinct() -> impl Strategy<Value = Vec<ObjectProposal>> {
        prop::collection::vec((0..LABELS.len(), arb_box()), 0..20)
            .prop_flat_map(|v| {
                let ranks: Vec<usize> = (0..v.len()).collect();
                (Just(v), Just(ranks).prop_shuffle())
            })
            .prop_map(|(v, ranks)| {
                let n = v.len() as f64;
                v.into_iter().zip(ranks).map(|((l, b), r)| ObjectProposal::new(LABELS[l], b, (r as f64 + 1.0) / (n + 1.0)).unwrap()).collect()
            })
    }

    fn arb_config() -> impl Strategy<Value = PruneConfig> {
        (0.05..0.95f64, prop::bool::ANY).prop_map(|(t, count)| {
            PruneConfig::new(t, if count { VoteWeighting::Count } else { VoteWeighting::Confidence }).unwrap()
        })
    }

    proptest! {
        #[test]
        fn nms_partitions_input(ps in arb_proposals(), cfg in arb_config()) {
            let out = nms_prune(&ps, &cfg);
            let mut seen: Vec<usize> = out.kept_source.clone();
            seen.extend(out.clusters.iter().flatten().map(|(i, _)| *i));
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..ps.len()).collect::<Vec<_>>());
            for (k, &src) in out.kept_source.iter().enumerate() {
                prop_assert_eq!(&out.kept[k], &ps[src]);
            }
        }

        #[test]
        fn survivors_do_not_overlap(ps in arb_proposals(), cfg in arb_config()) {
            let out = nms_prune(&ps, &cfg);
            for (i, a) in out.kept.iter().enumerate() {
                for b in &out.kept[i + 1..] {
                    prop_assert!(aabb_iou(&a.bbox, &b.bbox) <= cfg.iou_threshold);
                }
            }
        }

        #[test]
        fn suppressed_overlap_a_stronger_survivor(ps in arb_proposals(), cfg in arb_config()) {
            let out = nms_prune(&ps, &cfg);
            for (kept, cluster) in out.kept.iter().zip(&out.clusters) {
                for (_, p) in cluster {
                    prop_assert!(aabb_iou(&kept.bbox, &p.bbox) > cfg.iou_threshold);
                    prop_assert!(p.confidence <= kept.confidence);
                }
            }
        }

        #[test]
        fn nms_is_idempotent(ps in arb_proposals(), cfg in arb_config()) {
            let kept = nms_prune(&ps, &cfg).kept;
            let again = nms_prune(&kept, &cfg);
            prop_assert_eq!(again.kept, kept);
        }

        #[test]
        fn input_order_does_not_matter(ps in arb_distinct(), cfg in arb_config()) {
            let reversed: Vec<_> = ps.iter().rev().cloned().collect();
            prop_assert_eq!(prune(&ps, &cfg), prune(&reversed, &cfg));
        }

        #[test]
        fn relabel_keeps_geometry_and_votes_within_cluster(ps in arb_proposals(), cfg in arb_config()) {
            let out = nms_prune(&ps, &cfg);
            let relabeled = majority_relabel(&out, &cfg);
            prop_assert_eq!(relabeled.len(), out.kept.len());
            for ((r, kept), cluster) in relabeled.iter().zip(&out.kept).zip(&out.clusters) {
                prop_assert_eq!(r.bbox, kept.bbox);
                prop_assert_eq!(r.confidence, kept.confidence);
                let candidates: Vec<&str> = std::iter::once(kept.class_label.as_str())
                    .chain(cluster.iter().map(|(_, p)| p.class_label.as_str()))
                    .collect();
                prop_assert!(candidates.contains(&r.class_label.as_str()));
            }
        }
    }
}
