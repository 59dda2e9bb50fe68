use std::fs;

use dagan::{
    deform_sim::{level_spec, simulate_dataset, ElasticSpec, SIMULATION_FILE},
    imaging::Mask,
    imaging::{load_dataset, Image2D},
    metrics::nmae,
    phantom::{generate_phantom_dataset, PhantomSpec},
    warp::{warp_image, DeformationField2D},
};

fn phantoms(dir: &std::path::Path, n: usize) -> dagan::imaging::DatasetManifest {
    let spec = PhantomSpec {
        n_samples: n,
        ..PhantomSpec::default()
    };
    generate_phantom_dataset(&spec, dir).unwrap()
}

fn max_abs(a: &Image2D, b: &Image2D) -> f32 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f32::max)
}

#[test]
fn simulated_dataset_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let base = phantoms(&tmp.path().join("base"), 3);
    let spec = level_spec(3).unwrap().with_seed(11);
    let sim = simulate_dataset(&base, &spec, &tmp.path().join("sim")).unwrap();

    let recorded: ElasticSpec =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("sim").join(SIMULATION_FILE)).unwrap()).unwrap();
    assert_eq!(recorded.magnitude_range, (3.0, 4.0));
    assert_eq!(recorded.level_name, "NA-3");

    let loaded = load_dataset(tmp.path().join("sim/manifest.json")).unwrap();
    assert_eq!(loaded.len(), 3);
    for i in 0..3 {
        let orig = base.load_pair(i).unwrap();
        let p = loaded.load_pair(i).unwrap();
        assert!(max_abs(&p.source, &orig.source) < 1e-5);
        assert!(max_abs(p.reference(), &orig.target) < 1e-5);
        let field = DeformationField2D::read(&loaded.resolve(sim.pairs[i].field.as_ref().unwrap())).unwrap();
        let rewarped = warp_image(&orig.target, &field).unwrap();
        assert!(max_abs(&rewarped, &p.target) < 1e-4);
        let full = Mask::full(64, 64);
        assert!(nmae(&p.target, p.reference(), &full).unwrap() > 0.0);
    }

    let again = simulate_dataset(&base, &spec, &tmp.path().join("sim2")).unwrap();
    for (a, b) in sim.pairs.iter().zip(&again.pairs) {
        assert_eq!(
            fs::read(sim.resolve(&a.target)).unwrap(),
            fs::read(again.resolve(&b.target)).unwrap()
        );
    }
    let other = simulate_dataset(&base, &spec.clone().with_seed(12), &tmp.path().join("sim3")).unwrap();
    assert_ne!(other.load_pair(0).unwrap().target, sim.load_pair(0).unwrap().target);
}

#[test]
fn zero_magnitude_simulation_is_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let base = phantoms(&tmp.path().join("base"), 2);
    let spec = ElasticSpec::new((40, 40), (0.0, 0.0), "none", 0).unwrap();
    let sim = simulate_dataset(&base, &spec, &tmp.path().join("sim")).unwrap();
    for i in 0..2 {
        let p = sim.load_pair(i).unwrap();
        assert_eq!(&p.target, p.reference());
    }
}

#[test]
fn manifest_errors_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let base = phantoms(&tmp.path().join("base"), 2);
    fs::remove_file(base.resolve(&base.pairs[1].target)).unwrap();
    assert!(load_dataset(tmp.path().join("base/manifest.json")).is_err());
    assert!(load_dataset(tmp.path().join("missing.json")).is_err());
}
