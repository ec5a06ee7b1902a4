use std::path::Path;

use pyo3::prelude::*;
use zemi::{PyBm25Index, PyExperiment};

fn quickstart() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quickstart.toml").to_string_lossy().into_owned()
}

#[test]
fn index_retrieves_and_roundtrips() {
    let docs = vec![("a".to_string(), "cat sat".to_string()), ("b".to_string(), "dog ran".to_string())];
    let idx = PyBm25Index::new(docs, 1.2, 0.75).unwrap();
    let hits = idx.retrieve("cat", 5);
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].0, "a");
    assert!((hits[0].1 - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(idx.__len__(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("i.bm25");
    idx.save(path.to_str().unwrap()).unwrap();
    let back = PyBm25Index::load(path.to_str().unwrap()).unwrap();
    assert_eq!(back.retrieve("cat dog", 5), idx.retrieve("cat dog", 5));
}

#[test]
fn duplicate_ids_raise() {
    let docs = vec![("a".to_string(), "x".to_string()), ("a".to_string(), "y".to_string())];
    assert!(PyBm25Index::new(docs, 1.2, 0.75).is_err());
}

#[test]
fn experiment_runs_and_returns_dicts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_string_lossy().into_owned();
    let overrides = ["corpus", "tasks", "index", "cache", "checkpoints", "reports"]
        .iter()
        .zip(["c.jsonl", "tasks", "i.bm25", "r.jsonl", "ckpt", "rep"])
        .map(|(k, v)| format!("paths.{k}={root}/{v}"))
        .collect();
    let exp = PyExperiment::new(Some(&quickstart()), overrides).unwrap();
    let (docs, train, eval) = exp.synth().unwrap();
    assert!(docs > 0 && train == 4 && eval == 2);
    exp.index().unwrap();
    assert!(exp.retrieve().unwrap() > 0);
    Python::attach(|py| {
        let out = exp.train(py).unwrap();
        assert!(out.get_item("instances").unwrap().extract::<usize>().unwrap() > 0);
        let report = exp.eval(py, None).unwrap();
        let acc: f64 = report.get_item("macro_average").unwrap().extract().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    });
}

#[test]
fn bad_overrides_raise_value_error() {
    let err = PyExperiment::new(None, vec!["model.n_heads=3".into()]).err().unwrap();
    Python::attach(|py| assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py)));
}
