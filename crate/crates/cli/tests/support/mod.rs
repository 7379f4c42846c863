//! Independent oracles shared by the acceptance checks. Nothing here calls
//! into the code under test except to build inputs.

use std::collections::{BTreeMap, BTreeSet};

use semfl::callgraph::CallGraph;
use semfl::knowledge::KnowledgeBase;
use semfl::retrieval::RetrievalBundle;

pub type Edges = Vec<(usize, usize, f64)>;

pub fn name(i: usize) -> String {
    format!("n{i}")
}

pub fn call_graph(edges: &[(usize, usize, f64)]) -> CallGraph {
    let mut g = CallGraph::default();
    for &(a, b, w) in edges {
        g.add_edge(&name(a), &name(b), w as u64);
    }
    g
}

/// Symmetrized dense weights, indexed like the graph's sorted ids.
pub fn dense_by_id(n: usize, edges: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    let mut ids: Vec<String> = (0..n).map(name).collect();
    ids.sort();
    let at = |i: usize| ids.iter().position(|x| *x == name(i)).unwrap();
    let mut w = vec![vec![0.0; n]; n];
    for &(a, b, x) in edges {
        w[at(a)][at(b)] += x;
        w[at(b)][at(a)] += x;
    }
    w
}

/// Double sum over every ordered pair.
pub fn oracle_q(w: &[Vec<f64>], c: &[usize]) -> f64 {
    let n = w.len();
    let total: f64 = w.iter().flatten().sum();
    let k: Vec<f64> = w.iter().map(|r| r.iter().sum()).collect();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if c[i] == c[j] {
                q += w[i][j] - k[i] * k[j] / total;
            }
        }
    }
    q / total
}

/// Every set partition of `n` items as a restricted growth string.
pub fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, n: usize, cur: &mut Vec<usize>, max: usize, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        for c in 0..=max + 1 {
            cur.push(c);
            rec(i + 1, n, cur, max.max(c), out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if n > 0 {
        rec(1, n, &mut vec![0], 0, &mut out);
    }
    out
}

pub fn best_q(w: &[Vec<f64>]) -> f64 {
    all_partitions(w.len()).iter().map(|p| oracle_q(w, p)).fold(f64::MIN, f64::max)
}

pub fn two_cliques(a: usize, b: usize, bridge: (usize, usize)) -> Edges {
    let mut e = Vec::new();
    for i in 0..a {
        for j in (i + 1)..a {
            e.push((i, j, 1.0));
        }
    }
    for i in 0..b {
        for j in (i + 1)..b {
            e.push((a + i, a + j, 1.0));
        }
    }
    e.push((bridge.0, a + bridge.1, 1.0));
    e
}

/// Random multigraph on `n` nodes where every node has at least one edge.
pub fn random_graph(rng: &mut impl rand::Rng, n: usize) -> Edges {
    let m = rng.random_range(n / 2..=n * 2);
    let mut edges: Edges = (0..m)
        .map(|_| (rng.random_range(0..n), rng.random_range(0..n), rng.random_range(1..=5) as f64))
        .collect();
    let mut seen = vec![false; n];
    for &(a, b, _) in &edges {
        seen[a] = true;
        seen[b] = true;
    }
    for (i, s) in seen.iter().enumerate() {
        if !s {
            edges.push((i, (i + 1) % n, 1.0));
        }
    }
    edges
}

/// The repair rule replayed one merge at a time over plain index sets.
pub fn simulate_repair(w: &[Vec<f64>], mut modules: Vec<BTreeSet<usize>>, min: usize, max: usize) -> Vec<BTreeSet<usize>> {
    let between = |a: &BTreeSet<usize>, b: &BTreeSet<usize>| -> f64 {
        a.iter().flat_map(|&i| b.iter().map(move |&j| w[i][j])).sum()
    };
    'outer: loop {
        let mut order: Vec<usize> = (0..modules.len()).collect();
        order.sort_by_key(|&m| (modules[m].len(), *modules[m].first().unwrap()));
        for src in order {
            if modules[src].len() >= min {
                continue;
            }
            let neighbours: Vec<(usize, f64)> = (0..modules.len())
                .filter(|&t| t != src)
                .map(|t| (t, between(&modules[src], &modules[t])))
                .filter(|(_, x)| *x > 0.0)
                .collect();
            if neighbours.is_empty() {
                continue;
            }
            let pick = |candidates: Vec<(usize, f64)>| {
                candidates.into_iter().reduce(|a, b| {
                    if b.1 > a.1 || (b.1 == a.1 && modules[b.0].first() < modules[a.0].first()) {
                        b
                    } else {
                        a
                    }
                })
            };
            let roomy: Vec<(usize, f64)> = neighbours
                .iter()
                .copied()
                .filter(|n| modules[n.0].len() + modules[src].len() <= max)
                .collect();
            let target = pick(roomy).or_else(|| pick(neighbours)).unwrap().0;
            let moved = std::mem::take(&mut modules[src]);
            modules[target].extend(moved);
            modules.remove(src);
            continue 'outer;
        }
        return modules;
    }
}

pub fn reference_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn reference_embed(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for t in reference_tokens(text) {
        let mut h = 0xcbf29ce484222325u64;
        for b in t.as_bytes() {
            h = (h ^ u64::from(*b)).wrapping_mul(0x100000001b3);
        }
        v[(h % dim as u64) as usize] += 1.0;
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn reference_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Score every document, sort by similarity then id, keep `lambda`.
pub fn brute_top(docs: &[(String, String)], query: &str, lambda: usize, dim: usize) -> Vec<(String, f64)> {
    let q = reference_embed(query, dim);
    let mut all: Vec<(String, f64)> = docs
        .iter()
        .map(|(id, t)| (id.clone(), reference_cosine(&q, &reference_embed(t, dim))))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(lambda);
    all
}

/// Equal scores position by position; ids may differ only inside a group of
/// (numerically) tied scores.
pub fn same_ranking(got: &[(String, f64)], want: &[(String, f64)], tol: f64) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("length {} vs {}", got.len(), want.len()));
    }
    for (g, w) in got.iter().zip(want) {
        if (g.1 - w.1).abs() > tol {
            return Err(format!("{g:?} vs {w:?}"));
        }
        if g.0 != w.0 {
            let tied = want.iter().any(|x| x.0 == g.0 && (x.1 - g.1).abs() <= tol);
            if !tied {
                return Err(format!("{} out of place (expected {})", g.0, w.0));
            }
        }
    }
    Ok(())
}

/// Suspiciousness by looping over every (test, granularity, element,
/// candidate) tuple.
pub fn omega_scores(bundles: &[RetrievalBundle], kb: &KnowledgeBase) -> BTreeMap<String, f64> {
    let candidates: BTreeSet<&String> = bundles.iter().flat_map(|b| b.methods.iter().map(|m| &m.0)).collect();
    let mut out = BTreeMap::new();
    for cand in candidates {
        let module = &kb.maps.phi[cand];
        let mut s = 0.0;
        for b in bundles {
            for (g, e) in &b.modules {
                if g == module {
                    s += e;
                }
            }
            for (m, e) in &b.methods {
                if m == cand {
                    s += e;
                }
            }
            for (c, e) in &b.chunks {
                if &c.method_id == cand {
                    s += e;
                }
            }
        }
        out.insert(cand.clone(), s);
    }
    out
}

pub fn close_maps(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>, tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|((ka, va), (kb, vb))| ka == kb && (va - vb).abs() <= tol)
}
