//! Canonical labelling of small vertex- and edge-labelled graphs.
//!
//! Colour refinement (iterated neighbourhood signatures) followed by an
//! exhaustive individualisation search; the canonical certificate is the
//! lexicographically smallest over all discrete leaves, which makes it an
//! exact isomorphism invariant. Intended for graphs of a few dozen vertices.

use std::collections::BTreeMap;

/// Result of canonical labelling: `order[p]` is the vertex placed at position `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Canonical {
    pub certificate: String,
    pub order: Vec<usize>,
}

struct Input<'a> {
    labels: &'a [String],
    adj: Vec<Vec<(usize, u8)>>,
    edges: &'a [(usize, usize, u8)],
}

/// Canonical form of a graph with vertex `labels` and labelled undirected `edges`.
pub fn canonicalize(labels: &[String], edges: &[(usize, usize, u8)]) -> Canonical {
    let n = labels.len();
    let mut adj = vec![Vec::new(); n];
    for &(a, b, l) in edges {
        adj[a].push((b, l));
        adj[b].push((a, l));
    }
    let input = Input { labels, adj, edges };

    let mut sorted: Vec<&String> = labels.iter().collect();
    sorted.sort();
    sorted.dedup();
    let colors: Vec<usize> = labels.iter().map(|l| sorted.binary_search(&l).expect("present")).collect();
    let colors = refine(&input, colors);

    let mut best: Option<Canonical> = None;
    search(&input, colors, &mut best);
    best.unwrap_or(Canonical { certificate: String::new(), order: Vec::new() })
}

fn rank<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut uniq: Vec<K> = keys.to_vec();
    uniq.sort();
    uniq.dedup();
    keys.iter().map(|k| uniq.binary_search(k).expect("present")).collect()
}

fn num_classes(colors: &[usize]) -> usize {
    colors.iter().max().map_or(0, |m| m + 1)
}

fn refine(input: &Input<'_>, mut colors: Vec<usize>) -> Vec<usize> {
    loop {
        let sigs: Vec<(usize, Vec<(u8, usize)>)> = (0..colors.len())
            .map(|v| {
                let mut nb: Vec<(u8, usize)> = input.adj[v].iter().map(|&(u, l)| (l, colors[u])).collect();
                nb.sort_unstable();
                (colors[v], nb)
            })
            .collect();
        let next = rank(&sigs);
        if num_classes(&next) == num_classes(&colors) {
            return next;
        }
        colors = next;
    }
}

fn certificate(input: &Input<'_>, colors: &[usize]) -> Canonical {
    let n = colors.len();
    let mut order = vec![0; n];
    for (v, &c) in colors.iter().enumerate() {
        order[c] = v;
    }
    let mut edges: Vec<(usize, usize, u8)> = input
        .edges
        .iter()
        .map(|&(a, b, l)| {
            let (pa, pb) = (colors[a], colors[b]);
            (pa.min(pb), pa.max(pb), l)
        })
        .collect();
    edges.sort_unstable();
    let mut cert = String::new();
    for &v in &order {
        cert.push_str(&input.labels[v]);
        cert.push(';');
    }
    cert.push('|');
    for (a, b, l) in edges {
        cert.push_str(&format!("{a}-{b}:{l};"));
    }
    Canonical { certificate: cert, order }
}

fn search(input: &Input<'_>, colors: Vec<usize>, best: &mut Option<Canonical>) {
    let n = colors.len();
    if num_classes(&colors) == n {
        let c = certificate(input, &colors);
        if best.as_ref().map_or(true, |b| c.certificate < b.certificate) {
            *best = Some(c);
        }
        return;
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in &colors {
        *counts.entry(c).or_default() += 1;
    }
    let target = counts.iter().find(|(_, &k)| k > 1).map(|(&c, _)| c).expect("non-discrete");
    for v in (0..n).filter(|&v| colors[v] == target) {
        let keys: Vec<(usize, u8)> =
            colors.iter().enumerate().map(|(u, &c)| (c, u8::from(!(u == v || c != target)))).collect();
        let next = refine(input, rank(&keys));
        search(input, next, best);
    }
}
