//! Embedding and exact retrieval against a hand-written tokenizer, FNV-1a
//! hash and exhaustive cosine ranking.

use std::collections::BTreeMap;

use proptest::prelude::*;
use semfl::index::{build_index, retrieve, Embedder, EmbeddingIndex, Granularity, HashEmbedder};
use semfl::knowledge::{ChunkId, KnowledgeBase, MethodReport, ModuleReport};

fn reference_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn reference_fnv(bytes: &[u8]) -> u64 {
    let mut h = 14695981039346656037u64;
    for b in bytes {
        h = (h ^ u64::from(*b)).wrapping_mul(1099511628211);
    }
    h
}

fn reference_embed(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for t in reference_tokens(text) {
        v[(reference_fnv(t.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect()
}

fn reference_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Every entry scored, sorted by similarity then id.
fn exhaustive(docs: &[(String, String)], query: &str, dim: usize) -> Vec<(String, f64)> {
    let q = reference_embed(query, dim);
    let mut all: Vec<(String, f64)> = docs
        .iter()
        .map(|(id, t)| (id.clone(), reference_cosine(&q, &reference_embed(t, dim))))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all
}

#[test]
fn hashing_matches_reference() {
    let e = HashEmbedder::default();
    let text = "add add sub";
    let v = e.embed(text).unwrap();
    assert_eq!(v, reference_embed(text, 256));
    let add = (reference_fnv(b"add") % 256) as usize;
    let sub = (reference_fnv(b"sub") % 256) as usize;
    assert_ne!(add, sub);
    assert!((v[add] - 2.0 / 5f64.sqrt()).abs() < 1e-12);
    assert!((v[sub] - 1.0 / 5f64.sqrt()).abs() < 1e-12);
    assert_eq!(v.iter().filter(|x| **x != 0.0).count(), 2);
}

#[test]
fn five_entry_ranking_matches_exhaustive_cosine() {
    let docs: Vec<(String, String)> = [
        ("a", "parse the json token stream"),
        ("b", "render html template"),
        ("c", "json token lexer"),
        ("d", "token bucket rate limiter"),
        ("e", "close the stream"),
    ]
    .iter()
    .map(|(i, t)| (i.to_string(), t.to_string()))
    .collect();
    let e = HashEmbedder::default();
    let idx = EmbeddingIndex::build(Granularity::Method, docs.clone(), &e).unwrap();
    let query = "JSON token-stream";
    let got = retrieve(&idx, query, 5, &e).unwrap();
    let want = exhaustive(&docs, query, 256);
    assert_eq!(got.len(), 5);
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g.0, w.0);
        assert!((g.1 - w.1).abs() < 1e-9);
    }
}

fn toy_kb() -> KnowledgeBase {
    let words = [
        "parse", "lexer", "token", "render", "layout", "pixel", "cache", "evict", "socket", "retry",
    ];
    let chunk_counts = [3, 2, 2, 3, 2, 2, 3, 2, 2, 2];
    let mut methods = BTreeMap::new();
    let mut phi = BTreeMap::new();
    for i in 0..10 {
        let id = format!("m{i}");
        methods.insert(
            id.clone(),
            MethodReport {
                method_id: id.clone(),
                functionality: format!("{} {} handler number {i}", words[i], words[(i + 3) % 10]),
                chunk_descriptions: (0..chunk_counts[i])
                    .map(|k| format!("step {k} uses {} and {}", words[(i + k) % 10], words[(i * 7 + k) % 10]))
                    .collect(),
            },
        );
        phi.insert(id, if i < 5 { "g0".to_owned() } else { "g1".to_owned() });
    }
    let module = |id: &str, title: &str| ModuleReport {
        module_id: id.into(),
        title: title.into(),
        summary: format!("{title} summary"),
        detailed_findings: vec![format!("{title} finding")],
    };
    KnowledgeBase::from_reports(
        [("g0".into(), module("g0", "parsing front end")), ("g1".into(), module("g1", "network cache"))].into(),
        methods,
        phi,
    )
    .unwrap()
}

#[test]
fn index_sizes_follow_the_knowledge_base() {
    let kb = toy_kb();
    let e = HashEmbedder::default();
    let sizes: Vec<usize> = Granularity::ALL
        .iter()
        .map(|g| build_index(&e, &kb, *g).unwrap().len())
        .collect();
    assert_eq!(sizes, [2, 10, 23]);
    let chunks = build_index(&e, &kb, Granularity::Chunk).unwrap();
    for id in chunks.ids() {
        let c: ChunkId = id.parse().unwrap();
        assert!(kb.chunks_of(&c.method_id).contains(&c));
    }
}

#[test]
fn rebuild_is_byte_identical_and_survives_disk() {
    let kb = toy_kb();
    let e = HashEmbedder::default();
    let dir = tempfile::tempdir().unwrap();
    for g in Granularity::ALL {
        let a = build_index(&e, &kb, g).unwrap();
        let b = build_index(&e, &kb, g).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let path = dir.path().join(g.file_name());
        a.save(&path).unwrap();
        let loaded = EmbeddingIndex::load(&path).unwrap();
        for q in ["parse token", "socket retry cache", "step 2 uses pixel"] {
            assert_eq!(retrieve(&a, q, 7, &e).unwrap(), retrieve(&loaded, q, 7, &e).unwrap());
        }
    }
}

#[test]
fn lambda_three_of_ten() {
    let kb = toy_kb();
    let e = HashEmbedder::default();
    let idx = build_index(&e, &kb, Granularity::Method).unwrap();
    let hits = retrieve(&idx, "cache evict", 3, &e).unwrap();
    assert_eq!(hits.len(), 3);
    assert!(hits.windows(2).all(|w| w[0].1 >= w[1].1));
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"]).prop_map(String::from)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn token_order_does_not_matter(words in prop::collection::vec(word(), 1..12), seed in any::<u64>()) {
        let e = HashEmbedder::default();
        let mut shuffled = words.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed as usize).wrapping_add(i * 31) % n);
        }
        prop_assert_eq!(e.embed(&words.join(" ")).unwrap(), e.embed(&shuffled.join(" ")).unwrap());
    }

    #[test]
    fn full_retrieval_is_a_sorted_permutation(
        docs in prop::collection::vec(prop::collection::vec(word(), 1..6), 1..30),
        query in prop::collection::vec(word(), 1..6),
    ) {
        let docs: Vec<(String, String)> = docs
            .into_iter()
            .enumerate()
            .map(|(i, ws)| (format!("d{i:02}"), ws.join(" ")))
            .collect();
        let e = HashEmbedder::new(32).unwrap();
        let idx = EmbeddingIndex::build(Granularity::Chunk, docs.clone(), &e).unwrap();
        let hits = retrieve(&idx, &query.join(" "), docs.len(), &e).unwrap();
        let mut ids: Vec<_> = hits.iter().map(|h| h.0.clone()).collect();
        ids.sort();
        let mut want: Vec<_> = docs.iter().map(|d| d.0.clone()).collect();
        want.sort();
        prop_assert_eq!(ids, want);
        for w in hits.windows(2) {
            prop_assert!(w[0].1 >= w[1].1);
        }
        for h in &hits {
            prop_assert!((-1.0..=1.0).contains(&h.1));
        }
        let oracle = exhaustive(&docs, &query.join(" "), 32);
        for (g, o) in hits.iter().zip(&oracle) {
            prop_assert!((g.1 - o.1).abs() < 1e-9);
        }
    }
}
