//! Windowed conversation graphs with speaker- and direction-typed edges.
//!
//! Every utterance i attends to the utterances j in its window
//! [i - past, i + future] (itself included). The edge (i, j) carries a
//! relation determined by (role of i, role of j, whether i precedes j), and a
//! weight: the softmax over i's window of the provided scores, so each
//! utterance's incoming weights sum to one.
//!
//! This module is tape-free on purpose: it is the reference the
//! differentiable model path is checked against.

use std::io::Write;

use crate::data::Conversation;
use crate::error::{Error, Result};

/// Distinct relation types over `m` speaker roles with both speaker pair and
/// temporal direction typing: m roles for each endpoint, times two orders.
pub fn count_relations(m: usize) -> usize {
    2 * m * m
}

/// Maps (receiver role, sender role, order) triples to dense relation ids,
/// with either axis optionally collapsed for ablations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationRegistry {
    m: usize,
    speaker_typed: bool,
    temporal_typed: bool,
}

impl RelationRegistry {
    pub fn new(m: usize) -> Result<Self> {
        Self::collapsed(m, true, true)
    }

    pub fn collapsed(m: usize, speaker_typed: bool, temporal_typed: bool) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("need at least one speaker role".into()));
        }
        Ok(RelationRegistry {
            m,
            speaker_typed,
            temporal_typed,
        })
    }

    pub fn roles(&self) -> usize {
        self.m
    }

    pub fn count(&self) -> usize {
        let pairs = if self.speaker_typed { self.m * self.m } else { 1 };
        let orders = if self.temporal_typed { 2 } else { 1 };
        pairs * orders
    }

    /// Relation id for an edge from receiver role `a` to sender role `b`
    /// where `before` says the receiver utterance precedes the sender.
    pub fn id(&self, a: usize, b: usize, before: bool) -> Result<usize> {
        if a >= self.m || b >= self.m {
            return Err(Error::Data(format!(
                "speaker role out of range: ({a}, {b}) with {} roles",
                self.m
            )));
        }
        let pair = if self.speaker_typed { a * self.m + b } else { 0 };
        let order = if self.temporal_typed { before as usize } else { 0 };
        Ok(if self.temporal_typed { pair * 2 + order } else { pair })
    }
}

/// Speaker role per utterance: order of first appearance, capped so that the
/// role space stays bounded on conversations with many voices.
pub fn speaker_roles(conv: &Conversation, m_max: usize) -> Vec<usize> {
    let mut seen: Vec<&str> = Vec::new();
    conv.utterances
        .iter()
        .map(|u| {
            let pos = match seen.iter().position(|s| *s == u.speaker) {
                Some(p) => p,
                None => {
                    seen.push(&u.speaker);
                    seen.len() - 1
                }
            };
            pos.min(m_max.saturating_sub(1))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    /// Receiver utterance index.
    pub src: usize,
    /// Sender utterance index.
    pub dst: usize,
    pub relation: usize,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct ConversationGraph {
    pub n: usize,
    /// Sorted by (src, dst).
    pub edges: Vec<Edge>,
    pub relation_count: usize,
}

/// Row-major n x n boolean window mask: entry (i, j) is true when j lies in
/// i's attention window. The diagonal is always active.
pub fn window_mask(n: usize, window: (usize, usize)) -> Vec<bool> {
    let (past, future) = window;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        let lo = i.saturating_sub(past);
        let hi = (i + future).min(n - 1);
        for j in lo..=hi {
            mask[i * n + j] = true;
        }
    }
    mask
}

fn masked_softmax_row(scores: &[f64], mask: &[bool], out: &mut [f64]) {
    let mut mx = f64::NEG_INFINITY;
    for (j, &m) in mask.iter().enumerate() {
        if m && scores[j] > mx {
            mx = scores[j];
        }
    }
    let mut sum = 0.0;
    for j in 0..scores.len() {
        if mask[j] {
            let e = (scores[j] - mx).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = 0.0;
        }
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

/// Builds the typed, weighted graph for one conversation. `scores` is an
/// optional row-major n x n score matrix (row i holds receiver i's scores);
/// absent scores mean uniform attention over each window.
pub fn build_graph(
    roles: &[usize],
    window: (usize, usize),
    registry: &RelationRegistry,
    scores: Option<&[f64]>,
) -> Result<ConversationGraph> {
    let n = roles.len();
    if n == 0 {
        return Err(Error::Data("cannot build a graph for zero utterances".into()));
    }
    if let Some(s) = scores {
        if s.len() != n * n {
            return Err(Error::Shape {
                op: "build_graph",
                lhs: (n, n),
                rhs: (1, s.len()),
            });
        }
    }
    let mask = window_mask(n, window);
    let zeros;
    let scores = match scores {
        Some(s) => s,
        None => {
            zeros = vec![0.0; n * n];
            &zeros
        }
    };
    let mut edges = Vec::new();
    let mut alpha = vec![0.0; n];
    for i in 0..n {
        masked_softmax_row(&scores[i * n..(i + 1) * n], &mask[i * n..(i + 1) * n], &mut alpha);
        for j in 0..n {
            if mask[i * n + j] {
                edges.push(Edge {
                    src: i,
                    dst: j,
                    relation: registry.id(roles[i], roles[j], i < j)?,
                    weight: alpha[j],
                });
            }
        }
    }
    Ok(ConversationGraph {
        n,
        edges,
        relation_count: registry.count(),
    })
}

/// Per-relation mixing masks for the first convolution step: entry (i, j) of
/// matrix r is 1/|N_i^r| when (i, j) is an r-typed edge with j != i, else 0.
/// The neighbor count excludes the self loop, which the model handles through
/// its own untyped term.
pub fn relation_mix_masks(graph: &ConversationGraph) -> Vec<Vec<f64>> {
    let n = graph.n;
    let mut masks = vec![vec![0.0; n * n]; graph.relation_count];
    let mut counts = vec![vec![0usize; n]; graph.relation_count];
    for e in &graph.edges {
        if e.src != e.dst {
            masks[e.relation][e.src * n + e.dst] = 1.0;
            counts[e.relation][e.src] += 1;
        }
    }
    for (mask, count) in masks.iter_mut().zip(&counts) {
        for i in 0..n {
            if count[i] > 0 {
                let inv = 1.0 / count[i] as f64;
                for v in &mut mask[i * n..(i + 1) * n] {
                    *v *= inv;
                }
            }
        }
    }
    masks
}

/// Per-relation 0/1 adjacency without the 1/|N_i^r| factor, self excluded;
/// used when the normalizer is a learned scale instead of the neighbor count.
pub fn relation_adjacency(graph: &ConversationGraph) -> Vec<Vec<f64>> {
    let n = graph.n;
    let mut masks = vec![vec![0.0; n * n]; graph.relation_count];
    for e in &graph.edges {
        if e.src != e.dst {
            masks[e.relation][e.src * n + e.dst] = 1.0;
        }
    }
    masks
}

/// Unweighted union adjacency for the second convolution step: 1 where any
/// edge (i, j) with j != i exists, regardless of relation.
pub fn union_mask(graph: &ConversationGraph) -> Vec<f64> {
    let n = graph.n;
    let mut out = vec![0.0; n * n];
    for e in &graph.edges {
        if e.src != e.dst {
            out[e.src * n + e.dst] = 1.0;
        }
    }
    out
}

/// Writes one JSON object per edge: receiver, sender, the relation as
/// (receiver speaker, sender speaker, receiver-precedes-sender), and the
/// attention weight.
pub fn dump_graph(out: &mut impl Write, conv: &Conversation, graph: &ConversationGraph) -> Result<()> {
    for e in &graph.edges {
        let row = serde_json::json!({
            "src": e.src,
            "dst": e.dst,
            "relation": [
                conv.utterances[e.src].speaker,
                conv.utterances[e.dst].speaker,
                e.src < e.dst,
            ],
            "weight": e.weight,
        });
        serde_json::to_writer(&mut *out, &row)?;
        writeln!(out).map_err(|e| Error::io("graph dump", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, Utterance};
    use proptest::prelude::*;

    fn conv_with_speakers(speakers: &[&str]) -> Conversation {
        Conversation {
            id: "t".into(),
            utterances: speakers
                .iter()
                .map(|s| Utterance {
                    speaker: s.to_string(),
                    tokens: Some(vec!["hi".into()]),
                    features: None,
                    label: Label::Class(0),
                })
                .collect(),
        }
    }

    #[test]
    fn relation_counts_by_role_count() {
        assert_eq!(count_relations(1), 2);
        assert_eq!(count_relations(2), 8);
        assert_eq!(count_relations(3), 18);
        assert_eq!(RelationRegistry::new(2).unwrap().count(), 8);
        assert_eq!(RelationRegistry::collapsed(2, false, true).unwrap().count(), 2);
        assert_eq!(RelationRegistry::collapsed(2, true, false).unwrap().count(), 4);
        assert_eq!(RelationRegistry::collapsed(2, false, false).unwrap().count(), 1);
    }

    /// Five utterances alternating between two speakers, full window. The
    /// fixture lists, per relation, exactly which (receiver, sender) pairs
    /// appear (1-based to match pen-and-paper notation).
    #[test]
    fn dyadic_five_utterance_relation_table() {
        let conv = conv_with_speakers(&["p1", "p2", "p1", "p2", "p1"]);
        let roles = speaker_roles(&conv, 8);
        assert_eq!(roles, vec![0, 1, 0, 1, 0]);
        let reg = RelationRegistry::new(2).unwrap();
        let graph = build_graph(&roles, (10, 10), &reg, None).unwrap();
        assert_eq!(graph.edges.len(), 25);

        let expected: [(usize, usize, bool, &[(usize, usize)]); 8] = [
            (0, 0, true, &[(1, 3), (1, 5), (3, 5)]),
            (0, 0, false, &[(1, 1), (3, 1), (3, 3), (5, 1), (5, 3), (5, 5)]),
            (1, 1, true, &[(2, 4)]),
            (1, 1, false, &[(2, 2), (4, 2), (4, 4)]),
            (0, 1, true, &[(1, 2), (1, 4), (3, 4)]),
            (0, 1, false, &[(3, 2), (5, 2), (5, 4)]),
            (1, 0, true, &[(2, 3), (2, 5), (4, 5)]),
            (1, 0, false, &[(2, 1), (4, 1), (4, 3)]),
        ];
        for (a, b, before, pairs) in expected {
            let rel = reg.id(a, b, before).unwrap();
            let mut got: Vec<(usize, usize)> = graph
                .edges
                .iter()
                .filter(|e| e.relation == rel)
                .map(|e| (e.src + 1, e.dst + 1))
                .collect();
            got.sort_unstable();
            let mut want = pairs.to_vec();
            want.sort_unstable();
            assert_eq!(got, want, "relation ({a},{b},{before})");
        }
    }

    #[test]
    fn zero_window_yields_only_self_loops() {
        let conv = conv_with_speakers(&["a", "b", "a", "c"]);
        let roles = speaker_roles(&conv, 8);
        let reg = RelationRegistry::new(3).unwrap();
        let graph = build_graph(&roles, (0, 0), &reg, None).unwrap();
        assert_eq!(graph.edges.len(), 4);
        for (i, e) in graph.edges.iter().enumerate() {
            assert_eq!((e.src, e.dst), (i, i));
            assert_eq!(e.weight, 1.0);
            assert_eq!(e.relation, reg.id(roles[i], roles[i], false).unwrap());
        }
    }

    #[test]
    fn uniform_scores_spread_window_weight_evenly() {
        let conv = conv_with_speakers(&["a", "b", "a", "b", "a", "b"]);
        let roles = speaker_roles(&conv, 8);
        let reg = RelationRegistry::new(2).unwrap();
        let graph = build_graph(&roles, (1, 1), &reg, None).unwrap();
        // Interior rows see three utterances, boundary rows two.
        for e in &graph.edges {
            let expect = if e.src == 0 || e.src == 5 { 0.5 } else { 1.0 / 3.0 };
            assert!((e.weight - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn roles_cap_at_m_max() {
        let conv = conv_with_speakers(&["a", "b", "c", "d", "b"]);
        assert_eq!(speaker_roles(&conv, 3), vec![0, 1, 2, 2, 1]);
    }

    #[test]
    fn mix_masks_exclude_self_and_normalize() {
        let conv = conv_with_speakers(&["p1", "p2", "p1", "p2", "p1"]);
        let roles = speaker_roles(&conv, 8);
        let reg = RelationRegistry::new(2).unwrap();
        let graph = build_graph(&roles, (10, 10), &reg, None).unwrap();
        let masks = relation_mix_masks(&graph);
        assert_eq!(masks.len(), 8);
        let n = graph.n;
        for mask in &masks {
            for i in 0..n {
                assert_eq!(mask[i * n + i], 0.0);
                let row_sum: f64 = mask[i * n..(i + 1) * n].iter().sum();
                assert!(row_sum == 0.0 || (row_sum - 1.0).abs() < 1e-12);
            }
        }
        // Receiver 1 (u2) under relation (p2, p1, not-before) has senders
        // u1 alone, so the normalized entry is exactly 1.
        let rel = reg.id(1, 0, false).unwrap();
        assert_eq!(masks[rel][1 * n + 0], 1.0);
        // Receiver 3 (u4) has senders u1, u3 under that relation: 1/2 each.
        assert_eq!(masks[rel][3 * n + 0], 0.5);
        assert_eq!(masks[rel][3 * n + 2], 0.5);

        let union = union_mask(&graph);
        for i in 0..n {
            assert_eq!(union[i * n + i], 0.0);
            let row: f64 = union[i * n..(i + 1) * n].iter().sum();
            assert_eq!(row, (n - 1) as f64);
        }
    }

    #[test]
    fn dump_lists_speaker_names_and_order() {
        let conv = conv_with_speakers(&["alice", "bob"]);
        let roles = speaker_roles(&conv, 8);
        let reg = RelationRegistry::new(2).unwrap();
        let graph = build_graph(&roles, (1, 1), &reg, None).unwrap();
        let mut buf = Vec::new();
        dump_graph(&mut buf, &conv, &graph).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["src"], 0);
        assert_eq!(first["dst"], 0);
        assert_eq!(first["relation"][0], "alice");
        assert_eq!(first["relation"][1], "alice");
        assert_eq!(first["relation"][2], false);
        let cross: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(cross["relation"][0], "alice");
        assert_eq!(cross["relation"][1], "bob");
        assert_eq!(cross["relation"][2], true);
    }

    proptest! {
        #[test]
        fn incoming_weights_sum_to_one_and_ids_stay_in_range(
            n in 1usize..40,
            past in 0usize..12,
            future in 0usize..12,
            m in 1usize..4,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let roles: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
            let scores: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let reg = RelationRegistry::new(m).unwrap();
            let graph = build_graph(&roles, (past, future), &reg, Some(&scores)).unwrap();
            prop_assert!(graph.edges.len() <= n * n);
            let mut sums = vec![0.0; n];
            for e in &graph.edges {
                prop_assert!(e.relation < reg.count());
                prop_assert!(e.dst + past >= e.src && e.dst <= e.src + future);
                sums[e.src] += e.weight;
            }
            for s in sums {
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}
