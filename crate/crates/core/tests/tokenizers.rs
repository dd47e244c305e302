mod common;

use common::{max_rel_err, random_matrix, rng};
use survpath::autodiff::Tape;
use survpath::matrix::Matrix;
use survpath::param::ParamStore;
use survpath::patch::{load_embeddings, write_embeddings, PatchEmbeddingSet, PatchProjector};
use survpath::pathway::{
    filter_by_coverage, parse_gene_sets, GeneExpressionVector, GeneIndex, PathwayDefinition,
    PathwayEncoder,
};

fn def(name: &str, idx: &[usize]) -> PathwayDefinition {
    PathwayDefinition {
        name: name.into(),
        members: idx.iter().map(|i| format!("g{i}")).collect(),
        indices: idx.to_vec(),
    }
}

fn encoder(
    defs: Vec<PathwayDefinition>,
    n_genes: usize,
    d: usize,
    seed: u64,
) -> (PathwayEncoder, ParamStore) {
    let mut store = ParamStore::new();
    let enc = PathwayEncoder::new(&mut store, defs, n_genes, d, 0.25, &mut rng(seed)).unwrap();
    (enc, store)
}

#[test]
fn two_line_gmt_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sets.gmt");
    std::fs::write(
        &p,
        "HALLMARK_APOPTOSIS\thttp://example/a\tCASP3\tBAX\tBCL2\tCASP3\n\
         HALLMARK_HYPOXIA\tna\tHIF1A\tVEGFA\r\n",
    )
    .unwrap();
    let defs = parse_gene_sets(&p).unwrap();
    assert_eq!(defs.len(), 2);
    assert_eq!(defs[0].name, "HALLMARK_APOPTOSIS");
    let m0: Vec<&str> = defs[0].members.iter().map(String::as_str).collect();
    assert_eq!(m0, ["BAX", "BCL2", "CASP3"]);
    let m1: Vec<&str> = defs[1].members.iter().map(String::as_str).collect();
    assert_eq!(m1, ["HIF1A", "VEGFA"]);

    let genes = GeneIndex::new(vec![
        "VEGFA".into(),
        "BAX".into(),
        "CASP3".into(),
        "BCL2".into(),
    ])
    .unwrap();
    let kept = filter_by_coverage(&defs, &genes, 0.9).unwrap();
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].indices, vec![1, 2, 3]);
}

#[test]
fn gene_outside_every_pathway_leaves_tokens_bit_identical() {
    let (enc, store) = encoder(vec![def("A", &[0, 1, 2]), def("B", &[2, 3])], 6, 5, 3);
    let mut g = GeneExpressionVector {
        values: vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4],
    };
    let before = enc.encode(&store, &g).unwrap();
    g.values[4] += 10.0;
    g.values[5] -= 3.0;
    let after = enc.encode(&store, &g).unwrap();
    assert_eq!(before.data(), after.data());
}

#[test]
fn gene_in_one_pathway_changes_only_that_row() {
    let (enc, store) = encoder(
        vec![def("A", &[0, 1, 2]), def("B", &[2, 3]), def("C", &[4, 5])],
        6,
        5,
        4,
    );
    let mut g = GeneExpressionVector {
        values: vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4],
    };
    let before = enc.encode(&store, &g).unwrap();
    g.values[3] += 0.5;
    let after = enc.encode(&store, &g).unwrap();
    assert_eq!(before.row(0), after.row(0));
    assert_ne!(before.row(1), after.row(1));
    assert_eq!(before.row(2), after.row(2));
}

#[test]
fn golden_tokens() {
    let (enc, store) = encoder(vec![def("A", &[0, 1, 2]), def("B", &[1, 3])], 4, 4, 7);
    let g = GeneExpressionVector {
        values: vec![0.5, -1.0, 1.5, 0.25],
    };
    let t = enc.encode(&store, &g).unwrap();
    assert_eq!(t.shape(), (2, 4));
    for (a, b) in t.data().iter().zip(GOLDEN) {
        assert!((a - b).abs() < 1e-12, "{:?}", t.data());
    }
}

/// Recorded from this encoder after the gradient checks passed.
const GOLDEN: [f64; 8] = [
    -0.04275600968213865,
    0.360191991256876,
    0.23842262334872272,
    -0.030454969114798724,
    0.17868128062206134,
    0.4470050085489189,
    -0.6276083487600332,
    0.18596962466248673,
];

#[test]
fn embeddings_round_trip_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.pfe");
    let m = random_matrix(5, 8, &mut rng(1)).map(|v| v as f32 as f64);
    let coords: Vec<(i32, i32)> = (0..5).map(|i| (i * 256, -i)).collect();
    let set = PatchEmbeddingSet::new("s", m, Some(coords)).unwrap();
    write_embeddings(&p, &set).unwrap();
    let back = load_embeddings(&p).unwrap();
    assert_eq!(back.embeddings.data(), set.embeddings.data());
    assert_eq!(back.coords, set.coords);
}

#[test]
fn paper_scale_slide_loads() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("big.pfe");
    let m = random_matrix(14_509, 768, &mut rng(2)).map(|v| v as f32 as f64);
    write_embeddings(&p, &PatchEmbeddingSet::new("big", m, None).unwrap()).unwrap();
    let back = load_embeddings(&p).unwrap();
    assert_eq!(back.len(), 14_509);
    assert_eq!(back.embed_dim(), 768);
}

#[test]
fn projection_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let proj = PatchProjector::new(&mut store, 6, 4, &mut rng(8)).unwrap();
    let x = random_matrix(5, 6, &mut rng(9));
    let w = random_matrix(5, 4, &mut rng(10));
    let f = |s: &ParamStore, x: &Matrix| -> (f64, ParamStore, Matrix) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = proj.project_on_tape(&mut tape, s, xv).unwrap();
        let wv = tape.leaf(w.clone());
        let p = tape.mul(y, wv).unwrap();
        let l = tape.sum(p);
        let mut s2 = s.clone();
        s2.zero_grad();
        let g = tape.backward(l, &mut s2).unwrap();
        (tape.value(l).item(), s2, g.wrt(xv))
    };
    let (_, grads, dx) = f(&store, &x);
    let h = 1e-5;
    for id in [proj.weight(), proj.bias()] {
        let mut num = Matrix::zeros(store.value(id).rows(), store.value(id).cols());
        for k in 0..num.len() {
            let mut p = store.clone();
            p.value_mut(id).data_mut()[k] += h;
            let mut m = store.clone();
            m.value_mut(id).data_mut()[k] -= h;
            num.data_mut()[k] = (f(&p, &x).0 - f(&m, &x).0) / (2.0 * h);
        }
        assert!(max_rel_err(grads.grad(id), &num, 1e-6) < 1e-6);
    }
    let mut num = Matrix::zeros(5, 6);
    for k in 0..num.len() {
        let mut p = x.clone();
        p.data_mut()[k] += h;
        let mut m = x.clone();
        m.data_mut()[k] -= h;
        num.data_mut()[k] = (f(&store, &p).0 - f(&store, &m).0) / (2.0 * h);
    }
    assert!(max_rel_err(&dx, &num, 1e-6) < 1e-6);
}
