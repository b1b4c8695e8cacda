// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;

fn numeric(o: ProgramOutput) -> Vec<f32> {
    match o {
        ProgramOutput::Numeric(v) => v,
        ProgramOutput::Tokens(_) => panic!("expected numbers"),
    }
}

fn probes(c: &CompiledModel) -> Vec<Vec<u32>> {
    match c.program {
        Program::Reverse => c.all_inputs(5).unwrap(),
        Program::Xproportion => {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..1000)
                .map(|_| {
                    let len = rng.random_range(1..=c.max_len());
                    c.random_input(len, &mut rng).unwrap()
                })
                .collect()
        }
    }
}

#[test]
fn xproportion_examples() {
    let c = build_xproportion();
    let got = numeric(c.run(&c.encode(&["x", "b", "x"]).unwrap()).unwrap());
    for (g, want) in got.iter().zip([1.0, 0.5, 2.0 / 3.0]) {
        assert!((g - want).abs() < 1e-4, "{got:?}");
    }
    let zeros = numeric(c.run(&c.encode(&["b", "b", "b"]).unwrap()).unwrap());
    assert!(zeros.iter().all(|v| v.abs() < 1e-4));
}

#[test]
fn reverse_examples() {
    let c = build_reverse();
    let input = c.encode(&["1", "2", "3"]).unwrap();
    let want = c.encode(&["3", "2", "1"]).unwrap()[1..].to_vec();
    assert_eq!(c.run(&input).unwrap(), ProgramOutput::Tokens(want));
    let pal = c.encode(&["2", "1", "3", "1", "2"]).unwrap();
    assert_eq!(c.run(&pal).unwrap(), ProgramOutput::Tokens(pal[1..].to_vec()));
}

#[test]
fn full_model_and_ground_truth_follow_the_oracle() {
    for p in Program::ALL {
        let c = p.build();
        let inputs = probes(&c);
        if p == Program::Reverse {
            assert_eq!(inputs.len(), 3 + 9 + 27 + 81 + 243);
        }
        for x in &inputs {
            let want = c.oracle(x).unwrap();
            let full = c.run(x).unwrap();
            assert!(full.agrees(&want, 1e-4), "{p}: {x:?} gave {full:?}, want {want:?}");
            let gt = c.run_circuit(x, &c.ground_truth).unwrap();
            assert!(gt.agrees(&full, 1e-4), "{p}: circuit {gt:?} vs full {full:?}");
        }
    }
}

#[test]
fn every_ground_truth_edge_is_needed() {
    for p in Program::ALL {
        let c = p.build();
        let inputs = probes(&c);
        for e in c.ground_truth.kept_edge_indices() {
            let smaller = c.ground_truth.without_edge(e);
            let changed = inputs
                .iter()
                .any(|x| !c.run_circuit(x, &smaller).unwrap().agrees(&c.oracle(x).unwrap(), 1e-3));
            assert!(changed, "{p}: edge {} is redundant", c.model.graph().edges()[e]);
        }
    }
}

#[test]
fn other_edges_carry_nothing() {
    for p in Program::ALL {
        let c = p.build();
        let g = c.model.graph();
        let inputs: Vec<Vec<u32>> = probes(&c).into_iter().take(60).collect();
        let full = Circuit::full(&g);
        for e in (0..g.n_edges()).filter(|&e| !c.ground_truth.contains(e)) {
            let without = full.without_edge(e);
            for x in &inputs {
                let a = c
                    .model
                    .circuit_forward(
                        std::slice::from_ref(x),
                        std::slice::from_ref(x),
                        &without,
                        AblationMode::Zero,
                    )
                    .unwrap();
                assert_eq!(
                    a,
                    c.model.logits(std::slice::from_ref(x)).unwrap(),
                    "{p}: edge {}",
                    g.edges()[e]
                );
            }
        }
    }
}

#[test]
fn sizes_and_inputs() {
    let x = build_xproportion();
    assert_eq!(x.model.config.n_layers, 2);
    assert_eq!(x.ground_truth.n_kept(), 4);
    assert_eq!(x.model.graph().n_edges(), 23);
    let r = build_reverse();
    assert_eq!(r.model.config.n_layers, 3);
    assert_eq!(r.ground_truth.n_kept(), 8);
    assert!(r.encode(&["4"]).is_err());
    assert!(r.encode(&[]).is_err());
    assert!(r.encode(&["1"; 6]).is_err());
    assert!(r.oracle(&[2, 3]).is_err());
    assert_eq!("reverse".parse::<Program>().unwrap(), Program::Reverse);
    let ds = r.dataset(20, 1..=5, 3).unwrap();
    assert!(ds
        .iter()
        .all(|p| p.clean_tokens == p.corrupted_tokens && p.check().is_ok()));
    assert!(
        ds.iter()
            .map(|p| p.clean_tokens.len())
            .collect::<std::collections::BTreeSet<_>>()
            .len()
            > 1
    );
    assert!(r.dataset(5, 0..=2, 0).is_err());
}

#[test]
fn save_writes_model_and_circuit() {
    let c = build_reverse();
    let dir = tempfile::tempdir().unwrap();
    c.save(dir.path()).unwrap();
    let m = crate::model::load_model(&dir.path().join("model.json")).unwrap();
    assert_eq!(m, c.model);
    let json = std::fs::read_to_string(dir.path().join("ground_truth.json")).unwrap();
    assert_eq!(Circuit::from_json(&m.graph(), &json).unwrap(), c.ground_truth);
}
