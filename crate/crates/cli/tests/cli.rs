use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pvmap::arch::NetworkSpec;
use pvmap::dataset::{AnnotationSet, Raster};
use pvmap::network::{patch_tensor, Network, Prediction};
use pvmap::stitch::ProbabilityMap;

fn pvmap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvmap"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn pvmap")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pvmap(dir, args);
    assert!(
        out.status.success(),
        "pvmap {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    pvmap(dir, args).status.code().expect("exit code")
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn synth_counts_and_reruns_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let args = [
        "synth", "--seed", "7", "--scenes", "10", "--panels", "5", "--width", "128", "--height", "128",
    ];
    ok(d, &[&args[..], &["--out", "a"]].concat());
    ok(d, &[&args[..], &["--out", "b"]].concat());
    let report = ok(d, &["report", "--split", "a=a"]);
    assert_eq!(report.lines().nth(1).unwrap().split(',').nth(3), Some("50"));
    let (mut a, mut b) = (read_tree(&d.join("a")), read_tree(&d.join("b")));
    // 10 × (image, annotations, mask) + run.json, which echoes the differing --out
    assert_eq!(a.len(), 31);
    a.retain(|(n, _)| n != "run.json");
    b.retain(|(n, _)| n != "run.json");
    assert_eq!(a, b);
}

#[test]
fn zero_panels_give_empty_annotation_files() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["synth", "--out", "s", "--scenes", "2", "--panels", "0"]);
    for id in ["scene_000", "scene_001"] {
        let set = AnnotationSet::load(&tmp.path().join(format!("s/{id}.json"))).unwrap();
        assert!(set.polygons.is_empty());
    }
}

#[test]
fn exit_codes_separate_usage_input_and_numeric_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(d, &["train", "--data", "x", "--out", "m", "--arch", "resnet"]), 2);
    assert_eq!(code(d, &["train", "--out", "m"]), 2);
    assert_eq!(code(d, &["detect", "--maps", "missing", "--out", "o"]), 3);
    assert_eq!(code(d, &["bogus"]), 2);

    ok(
        d,
        &[
            "synth", "--out", "s", "--scenes", "1", "--panels", "3", "--width", "128", "--height", "128",
        ],
    );
    ok(d, &["extract", "--scenes", "s", "--out", "data", "--val-fraction", "0"]);
    fs::write(d.join("data/val.pvp"), b"not an archive").unwrap();
    let out = pvmap(
        d,
        &[
            "train",
            "--data",
            "data",
            "--out",
            "m",
            "--encoder",
            "2,2,2",
            "--decoder",
            "2,2,2",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("val.pvp"));
    fs::remove_file(d.join("data/val.pvp")).unwrap();

    let diverge = [
        "train",
        "--data",
        "data",
        "--out",
        "m",
        "--encoder",
        "2,2,2",
        "--decoder",
        "2,2,2",
        "--learning-rate",
        "1e30",
        "--epochs",
        "1",
        "--batch-size",
        "4",
    ];
    assert_eq!(code(d, &diverge), 4);
}

#[test]
fn config_file_is_overridden_by_flags_and_unknown_keys_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("synth.conf"),
        "scenes = 1\npanels = 2\nwidth = 128\nheight = 128\nseed = 3\n",
    )
    .unwrap();
    ok(d, &["--config", "synth.conf", "synth", "--out", "s", "--panels", "1"]);
    let set = AnnotationSet::load(&d.join("s/scene_000.json")).unwrap();
    assert_eq!(set.polygons.len(), 1);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("s/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["settings"]["seed"], "3");
    assert_eq!(manifest["settings"]["panels"], "1");

    fs::write(d.join("bad.conf"), "scenes = 1\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(code(d, &["--config", "bad.conf", "synth", "--out", "t"]), 2);
}

#[test]
fn predict_on_a_single_patch_raster_is_one_forward_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "synth", "--out", "s", "--scenes", "1", "--panels", "2", "--width", "128", "--height", "128",
        ],
    );
    ok(d, &["extract", "--scenes", "s", "--out", "data", "--val-fraction", "0"]);
    ok(
        d,
        &[
            "train",
            "--data",
            "data",
            "--out",
            "m",
            "--encoder",
            "2,4,4",
            "--decoder",
            "4,4,2",
            "--epochs",
            "1",
        ],
    );

    // a 41×41 scene cut from the synthetic raster
    let big = Raster::load_png(&d.join("s/scene_000.png"), "scene_000", 0.3).unwrap();
    let mut pixels = Vec::new();
    for r in 30..71 {
        pixels.extend_from_slice(&big.pixels[(r * big.width + 30) * 3..][..41 * 3]);
    }
    fs::create_dir(d.join("one")).unwrap();
    let small = Raster::new("tiny", 41, 41, 0.3, pixels.clone()).unwrap();
    small.save_png(&d.join("one/tiny.png")).unwrap();
    let set = AnnotationSet {
        raster_id: "tiny".into(),
        width: 41,
        height: 41,
        resolution_m: 0.3,
        polygons: vec![],
    };
    set.save(&d.join("one/tiny.json")).unwrap();
    ok(d, &["predict", "--model", "m", "--scenes", "one", "--out", "maps"]);

    let map = ProbabilityMap::load(&d.join("maps/tiny.pmap")).unwrap();
    let spec = NetworkSpec::from_manifest(&fs::read_to_string(d.join("m/network.txt")).unwrap()).unwrap();
    let net = Network::<f32>::load_weights(&spec, &d.join("m/weights.bin")).unwrap();
    let Prediction::Map(direct) = net.predict(&patch_tensor(&pixels).unwrap()).unwrap() else {
        panic!("segmenter predicts maps")
    };
    // the map file stores f32
    let direct: Vec<f64> = direct.iter().map(|&v| v as f32 as f64).collect();
    assert_eq!(map.values, direct);
}

#[test]
fn manifest_alias_matches_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "synth", "--out", "s", "--scenes", "2", "--panels", "1", "--width", "128", "--height", "128",
        ],
    );
    assert_eq!(
        ok(d, &["manifest", "--split", "x=s"]),
        ok(d, &["report", "--split", "x=s"])
    );
    assert_eq!(code(d, &["report", "--split", "nodir"]), 2);
}
