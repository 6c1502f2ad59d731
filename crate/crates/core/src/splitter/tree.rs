//! The collision resolution tree. Node `k` splits into `2k`, which is
//! transmitted, and `2k+1`, whose aggregate is inferred as `C(k) - C(2k)`.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::slot::{threshold, Slot, SlotCodec};
use crate::group::{GroupParams, Scalar};

pub const DEFAULT_MAX_RETRIES: u32 = 32;
/// Node ids are `u64`; deeper collisions are treated as stuck.
const MAX_SPLITTABLE_ID: u64 = (u64::MAX >> 1) - 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("round {got} is not next; expected {expected:?}")]
    OutOfOrder { expected: Option<u64>, got: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Deterministic,
    Probabilistic,
}

/// Deterministic: strictly below the threshold goes left. Probabilistic: the
/// coin decides.
pub fn split_decision(payload: &BigUint, threshold: &BigUint, mode: SplitMode, coin: bool) -> Branch {
    let left = match mode {
        SplitMode::Deterministic => payload < threshold,
        SplitMode::Probabilistic => coin,
    };
    if left {
        Branch::Left
    } else {
        Branch::Right
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Root,
    Transmitted,
    Inferred,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Empty,
    Resolved,
    /// Waiting for its split round.
    Collision,
    Split,
    Malformed,
    /// Probabilistic splitting failed `max_retries` times in a row.
    Stuck,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: u64,
    pub kind: NodeKind,
    pub aggregate: Scalar,
    pub slot: Option<Slot>,
    pub status: NodeStatus,
    pub mode: SplitMode,
    /// Consecutive failed probabilistic splits that led to this node.
    pub attempts: u32,
    #[serde(with = "super::opt_dec")]
    pub threshold: Option<BigUint>,
}

impl TreeNode {
    pub fn payload(&self) -> Option<&BigUint> {
        match (&self.status, &self.slot) {
            (NodeStatus::Resolved, Some(s)) => Some(&s.sum),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlameCause {
    /// A single message sits on the wrong side of a deterministic split.
    Misplaced,
    Stuck,
    Malformed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlameTrigger {
    pub node: u64,
    pub cause: BlameCause,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvanceReport {
    /// New or updated nodes, in id order.
    pub nodes: Vec<TreeNode>,
    pub resolved: Vec<u64>,
    pub blame: Vec<BlameTrigger>,
    pub nonsplit: bool,
}

#[derive(Clone, Debug)]
pub struct ResolutionTree {
    codec: SlotCodec,
    max_retries: u32,
    nodes: BTreeMap<u64, TreeNode>,
    frontier: BTreeSet<u64>,
    resolved: Vec<u64>,
    transmitted: Vec<u64>,
    first_split_attempts: Option<u32>,
    nonsplits: u32,
}

impl ResolutionTree {
    /// Starts a tree from the root round's aggregate.
    pub fn new(codec: SlotCodec, max_retries: u32, root: Scalar) -> (Self, AdvanceReport) {
        let mut tree = ResolutionTree {
            codec,
            max_retries,
            nodes: BTreeMap::new(),
            frontier: BTreeSet::new(),
            resolved: Vec::new(),
            transmitted: vec![1],
            first_split_attempts: None,
            nonsplits: 0,
        };
        let mut report = AdvanceReport::default();
        let node = tree.classify(1, NodeKind::Root, root, SplitMode::Deterministic, 0);
        tree.insert(node, &mut report);
        (tree, report)
    }

    pub fn codec(&self) -> &SlotCodec {
        &self.codec
    }

    pub fn node(&self, id: u64) -> Option<&TreeNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.values()
    }

    /// The next transmitted round, `2k` for the smallest pending collision `k`.
    pub fn next_round(&self) -> Option<u64> {
        self.frontier.first().map(|k| 2 * k)
    }

    /// Blocked access: no new messages until this is true.
    pub fn is_complete(&self) -> bool {
        self.frontier.is_empty()
    }

    pub fn transmitted_rounds(&self) -> &[u64] {
        &self.transmitted
    }

    pub fn inferred_rounds(&self) -> Vec<u64> {
        self.nodes.values().filter(|n| n.kind == NodeKind::Inferred).map(|n| n.id).collect()
    }

    /// Resolved node ids in resolution order.
    pub fn resolved(&self) -> &[u64] {
        &self.resolved
    }

    pub fn resolved_payloads(&self) -> Vec<BigUint> {
        self.resolved.iter().filter_map(|id| self.nodes[id].payload().cloned()).collect()
    }

    /// Probabilistic attempts needed for the first successful probabilistic
    /// split, if one happened.
    pub fn retries_to_first_split(&self) -> Option<u32> {
        self.first_split_attempts
    }

    pub fn nonsplit_count(&self) -> u32 {
        self.nonsplits
    }

    fn classify(&self, id: u64, kind: NodeKind, aggregate: Scalar, mode: SplitMode, attempts: u32) -> TreeNode {
        let slot = self.codec.decode(&aggregate).ok();
        let status = match &slot {
            None => NodeStatus::Malformed,
            Some(s) if s.count == 0 => NodeStatus::Empty,
            Some(s) if s.count == 1 => NodeStatus::Resolved,
            Some(_) if attempts >= self.max_retries || id > MAX_SPLITTABLE_ID => NodeStatus::Stuck,
            Some(_) => NodeStatus::Collision,
        };
        let threshold = match status {
            NodeStatus::Collision => slot.as_ref().and_then(|s| threshold(s).ok()),
            _ => None,
        };
        TreeNode { id, kind, aggregate, slot, status, mode, attempts, threshold }
    }

    /// Checks a resolved payload against every deterministic split above it.
    fn misplaced(&self, id: u64, payload: &BigUint) -> bool {
        let mut child = id;
        while child > 1 {
            let parent = &self.nodes[&(child / 2)];
            if parent.mode == SplitMode::Deterministic {
                if let Some(t) = &parent.threshold {
                    let went_left = child.is_multiple_of(2);
                    if went_left != (payload < t) {
                        return true;
                    }
                }
            }
            child /= 2;
        }
        false
    }

    fn insert(&mut self, node: TreeNode, report: &mut AdvanceReport) {
        match node.status {
            NodeStatus::Collision => {
                self.frontier.insert(node.id);
            }
            NodeStatus::Resolved => {
                self.resolved.push(node.id);
                report.resolved.push(node.id);
            }
            NodeStatus::Malformed => report.blame.push(BlameTrigger { node: node.id, cause: BlameCause::Malformed }),
            NodeStatus::Stuck => report.blame.push(BlameTrigger { node: node.id, cause: BlameCause::Stuck }),
            NodeStatus::Empty | NodeStatus::Split => {}
        }
        report.nodes.push(node.clone());
        self.nodes.insert(node.id, node);
        if let Some(n) = self.nodes.get(&report.nodes.last().expect("just pushed").id) {
            if n.status == NodeStatus::Resolved && self.misplaced(n.id, &n.slot.as_ref().expect("resolved").sum) {
                report.blame.push(BlameTrigger { node: n.id, cause: BlameCause::Misplaced });
            }
        }
    }

    /// Applies the aggregate of transmitted round `2k` and infers `2k+1`.
    pub fn advance(&mut self, params: &GroupParams, round: u64, aggregate: Scalar) -> Result<AdvanceReport, TreeError> {
        let expected = self.next_round();
        if expected != Some(round) {
            return Err(TreeError::OutOfOrder { expected, got: round });
        }
        let k = round / 2;
        self.frontier.remove(&k);
        self.transmitted.push(round);
        let parent = self.nodes.get_mut(&k).expect("frontier node exists");
        parent.status = NodeStatus::Split;
        let parent = parent.clone();
        let mut report = AdvanceReport { nodes: vec![parent.clone()], ..Default::default() };

        let right_agg = params.sub(&parent.aggregate, &aggregate);
        let parent_count = parent.slot.as_ref().map_or(0, |s| s.count);
        let counts = [&aggregate, &right_agg].map(|a| self.codec.decode(a).ok().map(|s| s.count));
        let nonsplit = matches!(counts, [Some(0), Some(c)] | [Some(c), Some(0)] if c == parent_count);

        let (mode, attempts) = match (parent.mode, nonsplit) {
            (SplitMode::Deterministic, false) => (SplitMode::Deterministic, 0),
            (SplitMode::Deterministic, true) => (SplitMode::Probabilistic, 0),
            (SplitMode::Probabilistic, false) => {
                self.first_split_attempts.get_or_insert(parent.attempts + 1);
                (SplitMode::Probabilistic, 0)
            }
            (SplitMode::Probabilistic, true) => (SplitMode::Probabilistic, parent.attempts + 1),
        };
        if nonsplit {
            self.nonsplits += 1;
            report.nonsplit = true;
        }
        let left = self.classify(round, NodeKind::Transmitted, aggregate, mode, attempts);
        let right = self.classify(round + 1, NodeKind::Inferred, right_agg, mode, attempts);
        self.insert(left, &mut report);
        self.insert(right, &mut report);
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::SecurityLevel;

    fn run(payloads: &[u64], coins: &mut impl FnMut() -> bool) -> (GroupParams, ResolutionTree) {
        let gp = GroupParams::derive(SecurityLevel::Test, b"tree").unwrap();
        let codec = SlotCodec::for_capacity(&gp, 8, 16).unwrap();
        let enc: Vec<Scalar> = payloads.iter().map(|&p| codec.encode(&gp, &BigUint::from(p)).unwrap()).collect();
        let (mut tree, _) = ResolutionTree::new(codec, DEFAULT_MAX_RETRIES, gp.sum_scalars(&enc));
        // where each message currently is
        let mut at: Vec<u64> = vec![1; payloads.len()];
        while let Some(round) = tree.next_round() {
            let k = round / 2;
            let node = tree.node(k).unwrap().clone();
            let mut sum = gp.zero();
            for (i, &p) in payloads.iter().enumerate() {
                if at[i] == k {
                    let coin = node.mode == SplitMode::Probabilistic && coins();
                    let b = split_decision(&BigUint::from(p), node.threshold.as_ref().unwrap(), node.mode, coin);
                    if b == Branch::Left {
                        at[i] = round;
                        sum = gp.add(&sum, &enc[i]);
                    } else {
                        at[i] = round + 1;
                    }
                }
            }
            let rep = tree.advance(&gp, round, sum).unwrap();
            assert!(rep.blame.is_empty());
        }
        (gp, tree)
    }

    #[test]
    fn reference_collision_tree() {
        let (_, tree) = run(&[36, 11, 28, 17, 38], &mut || unreachable!());
        let slot = |id| tree.node(id).unwrap().slot.clone().unwrap();
        let expect = [
            (1, (5, 130)),
            (2, (2, 28)),
            (3, (3, 102)),
            (4, (1, 11)),
            (5, (1, 17)),
            (6, (1, 28)),
            (7, (2, 74)),
            (14, (1, 36)),
            (15, (1, 38)),
        ];
        for (id, (c, s)) in expect {
            assert_eq!(slot(id), Slot::new(c, s as u32), "node {id}");
        }
        let t = |id| tree.node(id).unwrap().threshold.clone().unwrap();
        assert_eq!([t(1), t(2), t(3), t(7)], [26u32, 14, 34, 37].map(BigUint::from));
        assert_eq!(tree.transmitted_rounds(), &[1, 2, 4, 6, 14]);
        assert_eq!(tree.inferred_rounds(), vec![3, 5, 7, 15]);
        assert_eq!(tree.resolved_payloads(), [11u32, 17, 28, 36, 38].map(BigUint::from).to_vec());
    }

    #[test]
    fn distinct_payloads_one_round_each() {
        for payloads in [vec![1, 2], vec![5], vec![0, 255, 1, 254], (0..16).map(|i| i * 7 % 251).collect()] {
            let (_, tree) = run(&payloads, &mut || unreachable!());
            assert_eq!(tree.transmitted_rounds().len(), payloads.len());
            assert_eq!(tree.nonsplit_count(), 0);
        }
    }

    #[test]
    fn duplicates_fall_back_to_coins() {
        let mut flips = [true, true, false].into_iter().cycle();
        let (_, tree) = run(&[9, 9], &mut || flips.next().unwrap());
        // root (2,18): both go right, 2 empty, 3 full -> probabilistic from 3 on
        assert_eq!(tree.node(2).unwrap().status, NodeStatus::Empty);
        assert_eq!(tree.node(3).unwrap().mode, SplitMode::Probabilistic);
        assert_eq!(tree.resolved_payloads(), vec![BigUint::from(9u32); 2]);
        assert!(tree.retries_to_first_split().is_some());
    }

    #[test]
    fn persistent_nonsplit_gets_stuck() {
        let gp = GroupParams::derive(SecurityLevel::Test, b"tree").unwrap();
        let codec = SlotCodec::for_capacity(&gp, 8, 4).unwrap();
        let two = codec.encode_raw(&gp, 2, &BigUint::from(10u32));
        let (mut tree, _) = ResolutionTree::new(codec, 3, two.clone());
        let mut blame = Vec::new();
        while let Some(round) = tree.next_round() {
            blame = tree.advance(&gp, round, two.clone()).unwrap().blame;
        }
        assert_eq!(blame, vec![BlameTrigger { node: 16, cause: BlameCause::Stuck }]);
        assert_eq!(tree.transmitted_rounds(), &[1, 2, 4, 8, 16]);
    }

    #[test]
    fn wrong_side_is_misplaced() {
        let gp = GroupParams::derive(SecurityLevel::Test, b"tree").unwrap();
        let codec = SlotCodec::for_capacity(&gp, 8, 4).unwrap();
        let e = |p: u32| codec.encode(&gp, &BigUint::from(p)).unwrap();
        let (mut tree, _) = ResolutionTree::new(codec, 32, gp.add(&e(3), &e(50)));
        // 50 goes left although threshold is 27
        let rep = tree.advance(&gp, 2, e(50)).unwrap();
        assert_eq!(
            rep.blame,
            vec![
                BlameTrigger { node: 2, cause: BlameCause::Misplaced },
                BlameTrigger { node: 3, cause: BlameCause::Misplaced }
            ]
        );
    }

    #[test]
    fn rounds_must_follow_frontier() {
        let gp = GroupParams::derive(SecurityLevel::Test, b"tree").unwrap();
        let codec = SlotCodec::for_capacity(&gp, 8, 4).unwrap();
        let e = |p: u32| codec.encode(&gp, &BigUint::from(p)).unwrap();
        let (mut tree, _) = ResolutionTree::new(codec, 32, gp.add(&e(3), &e(50)));
        assert_eq!(tree.advance(&gp, 4, gp.zero()).unwrap_err(), TreeError::OutOfOrder { expected: Some(2), got: 4 });
        let (single, rep) = ResolutionTree::new(codec, 32, e(7));
        assert!(single.is_complete());
        assert_eq!(rep.resolved, vec![1]);
    }
}
