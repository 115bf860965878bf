use std::collections::BTreeSet;

use dnc_sfm_web::{cluster_scene, merge_scene, ransac_fit};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

fn ids(v: &Value) -> BTreeSet<u64> {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect()
}

#[test]
fn clusters_cover_the_scene_within_the_cap() {
    let v = parse(&cluster_scene("grid", 150, 40, 0.5, 3).unwrap());
    let cap = v["size_cap"].as_u64().unwrap() as usize;
    let clusters: Vec<BTreeSet<u64>> = v["clusters"].as_array().unwrap().iter().map(ids).collect();
    assert_eq!(clusters.len(), 3);
    let all: BTreeSet<u64> = clusters.iter().flatten().copied().collect();
    assert_eq!(all, (0..150).collect());
    for (i, c) in clusters.iter().enumerate() {
        assert!(c.len() <= cap);
        let shared: usize =
            clusters.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, o)| c.intersection(o).count()).sum();
        assert_eq!(v["completeness"][i].as_f64().unwrap(), shared as f64 / c.len() as f64);
    }
    assert_eq!(v["centers"].as_array().unwrap().len(), 150);
}

#[test]
fn noiseless_merge_recovers_the_ground_truth() {
    let a = merge_scene("orbit", 160, 50, 0.0, 0.0, 0.01, 1).unwrap();
    assert_eq!(a, merge_scene("orbit", 160, 50, 0.0, 0.0, 0.01, 1).unwrap());
    let v = parse(&a);
    assert_eq!(v["models"], 1);
    assert!(v["center_rmse"].as_f64().unwrap() < 1e-7);
    let truth = v["truth"].as_array().unwrap();
    for m in v["merged"].as_array().unwrap() {
        let i = m[0].as_u64().unwrap() as usize;
        for d in 0..3 {
            assert!((m[1][d].as_f64().unwrap() - truth[i][d].as_f64().unwrap()).abs() < 1e-6);
        }
    }
    let anchor = v["anchor"].as_u64().unwrap();
    assert!(v["hops"].as_array().unwrap().iter().any(|h| h[0] == anchor && h[1] == 0));
}

#[test]
fn ransac_rejects_injected_outliers() {
    let v = parse(&ransac_fit(60, 0.3, 0.001, 0.05, 7).unwrap());
    let rel = (v["scale"].as_f64().unwrap() / v["true_scale"].as_f64().unwrap() - 1.0).abs();
    assert!(rel < 0.01, "scale off by {rel}");
    assert!(v["rotation_error_deg"].as_f64().unwrap() < 1.0);
    let outlier = v["outlier"].as_array().unwrap();
    let inlier = v["inlier"].as_array().unwrap();
    assert_eq!(outlier.iter().filter(|o| o.as_bool().unwrap()).count(), 18);
    for (o, i) in outlier.iter().zip(inlier) {
        if o.as_bool().unwrap() {
            assert!(!i.as_bool().unwrap());
        }
    }
    assert!(inlier.iter().filter(|i| i.as_bool().unwrap()).count() >= 40);
}

#[test]
fn bad_arguments_are_errors() {
    assert!(cluster_scene("spiral", 100, 30, 0.5, 0).is_err());
    assert!(cluster_scene("orbit", 100_000, 30, 0.5, 0).is_err());
    assert!(merge_scene("orbit", 100, 30, -1.0, 0.0, 0.01, 0).is_err());
    assert!(ransac_fit(2, 0.0, 0.0, 0.01, 0).is_err());
    assert!(ransac_fit(50, 1.0, 0.0, 0.01, 0).is_err());
}
