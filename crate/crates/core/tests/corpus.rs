use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use dedr_core::corpus::synthetic::{generate, SyntheticConfig};
use dedr_core::corpus::{Dataset, Split};
use dedr_core::text::tokenize;

fn seven() -> SyntheticConfig {
    SyntheticConfig::new(7, 200, 1000, 500, 8)
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn same_seed_gives_byte_identical_corpora() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&seven()).unwrap().save(a.path()).unwrap();
    generate(&seven()).unwrap().save(b.path()).unwrap();
    let fa = files(a.path());
    assert_eq!(fa.len(), 8);
    assert_eq!(fa, files(b.path()));
    let c = tempfile::tempdir().unwrap();
    generate(&SyntheticConfig::new(8, 200, 1000, 500, 8))
        .unwrap()
        .save(c.path())
        .unwrap();
    assert_ne!(fa, files(c.path()));
}

#[test]
fn write_then_ingest_is_bit_identical() {
    let ds = generate(&seven()).unwrap();
    let a = tempfile::tempdir().unwrap();
    ds.save(a.path()).unwrap();
    let back = Dataset::load(a.path(), 36, 8).unwrap();
    assert_eq!(back.queries, ds.queries);
    assert_eq!(back.passages, ds.passages);
    assert_eq!(back.captions, ds.captions);
    assert_eq!(back.visual, ds.visual);
    assert_eq!(back.objects, ds.objects);
    let b = tempfile::tempdir().unwrap();
    back.save(b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
}

/// Share of questions whose relevant passage ranks in the top 10 under
/// exhaustive token-overlap scoring of question + caption against every
/// passage. Ties are broken against the relevant passage.
fn overlap_top10_rate(ds: &Dataset) -> f64 {
    let passages: Vec<(String, HashSet<String>)> = ds
        .passages
        .iter()
        .map(|p| {
            (
                p.passage_id.clone(),
                tokenize(&p.text).into_iter().collect(),
            )
        })
        .collect();
    let records: Vec<_> = Split::ALL.iter().flat_map(|s| ds.split(*s)).collect();
    let mut hits = 0;
    for r in &records {
        let caption = ds.caption(&r.image_id).unwrap();
        let query: HashSet<String> = tokenize(&format!("{} {caption}", r.question))
            .into_iter()
            .collect();
        let score = |toks: &HashSet<String>| toks.intersection(&query).count();
        let gold = &r.relevant_passage_ids[0];
        let gold_score = score(&passages.iter().find(|(id, _)| id == gold).unwrap().1);
        let ahead = passages
            .iter()
            .filter(|(id, t)| id != gold && score(t) >= gold_score)
            .count();
        if ahead < 10 {
            hits += 1;
        }
    }
    hits as f64 / records.len() as f64
}

#[test]
fn relevant_passage_is_recoverable_by_token_overlap() {
    let rate = overlap_top10_rate(&generate(&seven()).unwrap());
    println!("top-10 overlap rate {rate:.3}");
    assert!(rate >= 0.8, "{rate}");
}
