mod common;

use common::*;
use mzu::analysis::{
    csv_bytes, export_map, pgm_bytes, pixel, relevance_map, zone_contributions, zone_relevance_map, MapFormat, RelevanceMap,
};
use mzu::cells::{Ablation, CellConfig};
use mzu::model::CharLm;
use mzu::numerics::ParamStore;
use mzu::zones::Composition;
use mzu::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_cell(kind: Composition, depth: usize) -> CellConfig {
    let mut c = CellConfig::mzu(3, 8, kind);
    c.zones = 4;
    c.out_zones = 2;
    c.routing_iters = 3;
    c.d_ff = 6;
    c.depth = depth;
    c
}

fn build(cell: CellConfig, vocab: usize, seed: u64) -> (CharLm, ParamStore<f64>) {
    let model = CharLm::new(cell, vocab).unwrap();
    let mut store = ParamStore::new();
    model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    jitter(&mut store, seed + 1);
    // larger embeddings keep the zones away from zero
    let e = random_mat(vocab, 3, &mut ChaCha8Rng::seed_from_u64(seed + 2));
    store.set("embed", from_mat(&e)).unwrap();
    (model, store)
}

struct OracleStep {
    candidate: Vec<f64>,
    /// Abstracted zones of the first depth's candidate transformation.
    f: Mat,
    h: Vec<f64>,
}

/// The character model run by hand: first cell reads the embedding, each
/// transition cell reads only the state; scopes are shared across depths.
fn oracle_run(store: &ParamStore<f64>, kind: Composition, depth: usize, tokens: &[usize]) -> Vec<OracleStep> {
    let embed = param_mat(store, "embed");
    let j = if kind == Composition::Cap { 2 } else { 4 };
    let norm = |v: &[f64], s: &str| layer_norm(v, &param_vec(store, &format!("{s}/gain")), &param_vec(store, &format!("{s}/bias")));
    let mut h = vec![0.0; 8];
    let mut out = Vec::new();
    for &id in tokens {
        let mut first = None;
        for l in 0..=depth {
            let x = (l == 0).then_some(embed[id].as_slice());
            let (mh, _, f) = m_apply_full(store, "mh", kind, x, &h, 4, j, 3);
            let (mg, _) = m_apply(store, "mg", kind, x, &h, 4, j, 3);
            let cand: Vec<f64> = norm(&mh, &format!("ln/d{l}/h")).iter().map(|v| v.tanh()).collect();
            let gate: Vec<f64> = norm(&mg, &format!("ln/d{l}/g")).iter().map(|&v| sigmoid(v)).collect();
            if l == 0 {
                first = Some((cand.clone(), f));
            }
            h = mix(&h, &gate, &cand);
        }
        let (candidate, f) = first.unwrap();
        out.push(OracleStep {
            candidate,
            f,
            h: h.clone(),
        });
    }
    out
}

#[test]
fn toy_relevance_matches_cosine_oracle() {
    for (kind, depth) in [(Composition::Sat, 0), (Composition::Cap, 1)] {
        let (model, store) = build(toy_cell(kind, depth), 5, 11);
        let tokens = [2, 0, 4];
        let map = relevance_map(&model, &store, &tokens, 2).unwrap();
        let oracle = oracle_run(&store, kind, depth, &tokens);
        assert_eq!(map.queries, vec![1, 2]);
        assert_eq!(map.zone, None);
        for (&t, row) in map.queries.iter().zip(&map.rows) {
            let want: Vec<f64> = (0..t).map(|p| cosine(&oracle[t].candidate, &oracle[p].h)).collect();
            assert!(max_diff(row, &want) < 1e-10, "{kind:?} t={t}: {row:?} vs {want:?}");
        }
    }
}

#[test]
fn rows_cover_strictly_earlier_positions() {
    let (model, store) = build(toy_cell(Composition::Gcn, 0), 6, 3);
    let tokens = [0, 1, 2, 3, 4, 5, 0, 1];
    let map = relevance_map(&model, &store, &tokens, 5).unwrap();
    assert_eq!(map.queries, vec![3, 4, 5, 6, 7]);
    assert_eq!(map.context_len(), 7);
    for (&t, row) in map.queries.iter().zip(&map.rows) {
        assert_eq!(row.len(), t);
        assert!(row.iter().all(|r| (-1.0..=1.0).contains(r)));
    }
}

#[test]
fn gru_relevance_uses_its_candidate() {
    let (model, store) = build(CellConfig::gru(3, 8), 4, 5);
    let map = relevance_map(&model, &store, &[0, 1, 2, 3], 3).unwrap();
    assert_eq!(map.rows.len(), 3);
    assert!(map.rows.iter().flatten().all(|r| (-1.0..=1.0).contains(r)));
}

#[test]
fn short_text_is_an_error() {
    let (model, store) = build(toy_cell(Composition::Sat, 0), 4, 1);
    assert!(matches!(relevance_map(&model, &store, &[0, 1], 2), Err(Error::Data(_))));
    assert!(matches!(relevance_map(&model, &store, &[0, 1, 2], 0), Err(Error::Config { .. })));
    assert!(matches!(zone_relevance_map(&model, &store, &[0], 1), Err(Error::Data(_))));
}

#[test]
fn maps_are_deterministic() {
    let (model, store) = build(toy_cell(Composition::Cap, 1), 4, 9);
    let tokens = [3, 1, 0, 2, 2, 1];
    assert_eq!(relevance_map(&model, &store, &tokens, 4).unwrap(), relevance_map(&model, &store, &tokens, 4).unwrap());
    assert_eq!(
        zone_relevance_map(&model, &store, &tokens, 4).unwrap(),
        zone_relevance_map(&model, &store, &tokens, 4).unwrap()
    );
}

#[test]
fn zone_maps_one_per_abstracted_zone() {
    let tokens = [0, 1, 2, 1, 0];
    for (kind, want) in [(Composition::Sat, 4), (Composition::Gcn, 4), (Composition::Cap, 2)] {
        let (model, store) = build(toy_cell(kind, 0), 3, 2);
        let maps = zone_relevance_map(&model, &store, &tokens, 3).unwrap();
        assert_eq!(maps.len(), want, "{kind:?}");
        for (k, m) in maps.iter().enumerate() {
            assert_eq!(m.zone, Some(k));
            assert_eq!(m.queries, vec![2, 3, 4]);
        }
    }
}

#[test]
fn toy_zone_relevance_matches_masked_oracle() {
    for kind in [Composition::Sat, Composition::Cap] {
        let (model, store) = build(toy_cell(kind, 1), 5, 21);
        let tokens = [4, 1, 3, 0];
        let maps = zone_relevance_map(&model, &store, &tokens, 2).unwrap();
        let oracle = oracle_run(&store, kind, 1, &tokens);
        let w = param_mat(&store, "mh/agg_w");
        for (k, map) in maps.iter().enumerate() {
            for (&t, row) in map.queries.iter().zip(&map.rows) {
                let masked: Vec<f64> = oracle[t]
                    .f
                    .iter()
                    .enumerate()
                    .flat_map(|(i, fz)| fz.iter().map(move |&v| if i == k { v } else { 0.0 }))
                    .collect();
                let q = vecmat(&masked, &w);
                let want: Vec<f64> = (0..t).map(|p| cosine(&q, &oracle[p].h)).collect();
                assert!(max_diff(row, &want) < 1e-10, "{kind:?} zone {k} t={t}");
            }
        }
    }
}

#[test]
fn zone_relevance_needs_a_zone_candidate() {
    let (gru, store) = build(CellConfig::gru(3, 8), 3, 1);
    assert!(matches!(zone_relevance_map(&gru, &store, &[0, 1, 2], 1), Err(Error::Config { .. })));
    let mut cell = toy_cell(Composition::Sat, 0);
    cell.ablation = Ablation::RegularTrans;
    let (plain, store) = build(cell, 3, 1);
    assert!(matches!(zone_relevance_map(&plain, &store, &[0, 1, 2], 1), Err(Error::Config { .. })));
    // a plain gate keeps the zone candidate
    let mut cell = toy_cell(Composition::Sat, 0);
    cell.ablation = Ablation::RegularGate;
    let (gate, store) = build(cell, 3, 1);
    assert_eq!(zone_relevance_map(&gate, &store, &[0, 1, 2], 1).unwrap().len(), 4);
}

#[test]
fn mismatched_store_is_rejected() {
    let (model, _) = build(toy_cell(Composition::Sat, 0), 4, 1);
    let (_, other) = build(toy_cell(Composition::Cap, 0), 4, 1);
    assert!(matches!(relevance_map(&model, &other, &[0, 1, 2], 1), Err(Error::Shape { .. })));
}

fn kind_strategy() -> impl Strategy<Value = Composition> {
    prop_oneof![Just(Composition::Sat), Just(Composition::Gcn), Just(Composition::Cap)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn zone_contributions_sum_to_candidate(
        kind in kind_strategy(),
        depth in 0usize..2,
        seed in 0u64..10_000,
        tokens in prop::collection::vec(0usize..5, 1..6),
    ) {
        let (model, store) = build(toy_cell(kind, depth), 5, seed);
        let per_t = zone_contributions(&model, &store, &tokens).unwrap();
        prop_assert_eq!(per_t.len(), tokens.len());
        for c in &per_t {
            let mut total = c.bias.clone();
            for z in &c.zones {
                total = add_vec(&total, z);
            }
            prop_assert!(max_diff(&total, &c.candidate_pre) < 1e-5);
        }
    }

    #[test]
    fn relevance_values_are_cosines(seed in 0u64..10_000, tokens in prop::collection::vec(0usize..4, 2..8)) {
        let (model, store) = build(toy_cell(Composition::Sat, 0), 4, seed);
        let q = tokens.len() - 1;
        let map = relevance_map(&model, &store, &tokens, q).unwrap();
        for (&t, row) in map.queries.iter().zip(&map.rows) {
            prop_assert_eq!(row.len(), t);
            prop_assert!(row.iter().all(|r| (-1.0..=1.0).contains(r)));
        }
    }
}

// ---------------------------------------------------------------- export

fn sample_map() -> RelevanceMap {
    RelevanceMap {
        tokens: vec![0, 1, 2, 0],
        queries: vec![2, 3],
        rows: vec![vec![1.0, -1.0], vec![0.0, 0.123456789, -0.5]],
        zone: None,
    }
}

fn label(id: usize) -> String {
    ["a", ",", "\""][id].to_string()
}

#[test]
fn pixel_anchors() {
    assert_eq!(pixel(1.0), 255);
    assert_eq!(pixel(-1.0), 0);
    assert_eq!(pixel(0.0), 128);
    assert_eq!(pixel(0.5), 191);
}

#[test]
fn pgm_layout() {
    let bytes = pgm_bytes(&sample_map());
    let header = b"P5\n3 2\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[header.len()..], &[255, 0, 255, 128, 143, 64]);
}

#[test]
fn csv_round_trip() {
    let map = sample_map();
    let bytes = csv_bytes(&map, &label).unwrap();
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, vec!["query", "a", ",", "\""]);
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for (rec, (&t, want)) in rows.iter().zip(map.queries.iter().zip(&map.rows)) {
        assert_eq!(rec[0].parse::<usize>().unwrap(), t);
        for (p, w) in want.iter().enumerate() {
            let got: f64 = rec[p + 1].parse().unwrap();
            assert!((got - w).abs() < 5e-7);
        }
        assert!(rec.iter().skip(t + 1).all(str::is_empty));
    }
}

#[test]
fn export_writes_files_and_reports_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let map = sample_map();
    let pgm = dir.path().join("maps/r.pgm");
    export_map(&map, &pgm, MapFormat::Pgm, &label).unwrap();
    assert_eq!(std::fs::read(&pgm).unwrap(), pgm_bytes(&map));
    let csv_path = dir.path().join("r.csv");
    export_map(&map, &csv_path, "CSV".parse().unwrap(), &label).unwrap();
    assert_eq!(std::fs::read(&csv_path).unwrap(), csv_bytes(&map, &label).unwrap());
    let blocked = pgm.join("under_a_file.pgm");
    assert!(matches!(export_map(&map, &blocked, MapFormat::Pgm, &label), Err(Error::Io { .. })));
    assert!("png".parse::<MapFormat>().is_err());
}
