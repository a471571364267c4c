//! The JSON fixtures in `fixtures/` must match the built-in workloads.
//! Run with `UPDATE_FIXTURES=1` to regenerate them.

use std::path::PathBuf;

use coeflow::coesim::CoEConfig;
use coeflow::fixtures;
use coeflow::opgraph::{GraphFile, OpGraph};

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[test]
fn shipped_fixtures_are_in_sync() {
    let update = std::env::var_os("UPDATE_FIXTURES").is_some();
    for (name, want) in fixtures::shipped() {
        let path = dir().join(name);
        if update {
            std::fs::create_dir_all(dir()).unwrap();
            std::fs::write(&path, &want).unwrap();
            continue;
        }
        let have = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(have, want, "{name} is stale; rerun with UPDATE_FIXTURES=1");
    }
}

#[test]
fn shipped_fixtures_load() {
    let monarch = OpGraph::load(dir().join("monarch.json")).unwrap();
    assert_eq!(monarch.operators(), fixtures::monarch().operators());
    let prefill = GraphFile::load(dir().join("decoder_prefill.json")).unwrap();
    assert_eq!(prefill.fusion_hints, fixtures::DECODER_HINTS);
    assert_eq!(prefill.into_graph().unwrap().operators().len(), 33);
    let coe = CoEConfig::from_json(&std::fs::read_to_string(dir().join("coe_150.json")).unwrap()).unwrap();
    assert_eq!(coe.experts().len(), 150);
}
