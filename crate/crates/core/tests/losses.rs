use std::path::Path;
use std::sync::Arc;

use camo::attention::AttentionStack;
use camo::losses::{
    fas_baa, nps, region_mean, smooth_3d, topk_mean, total_loss, LossWeights, PrintablePalette,
    RATIO_EPS,
};
use camo::scene::{parse_obj, Mesh};
use camo::Error;
use diffcore::{Tape, Tensor};
use proptest::prelude::*;

fn mesh(obj: &str) -> Mesh {
    parse_obj(obj, Path::new("fixture.obj")).unwrap()
}

/// Two triangles sharing the unit edge from (0,0,0) to (1,0,0).
fn unit_edge_pair(scale: f64) -> Mesh {
    mesh(&format!(
        "v 0 0 0\nv {s} 0 0\nv 0 {s} 0\nv 0 -{s} 0\nf 1 2 3\nf 2 1 4\n",
        s = scale
    ))
}

fn stack<'t>(tape: &'t Tape, map: &[f64], mask: &[f64]) -> AttentionStack<'t> {
    let size = (map.len() as f64).sqrt() as usize;
    let layer = tape.leaf(Tensor::from_vec(map.to_vec()), true);
    AttentionStack::from_layers(
        size,
        vec![("l".into(), layer)],
        vec![],
        Arc::new(mask.to_vec()),
    )
    .unwrap()
}

fn weights(alpha1: f64, alpha2: f64, k: usize) -> LossWeights {
    LossWeights {
        alpha1,
        alpha2,
        k,
        ..LossWeights::default()
    }
}

#[test]
fn region_mean_examples() {
    let tape = Tape::new();
    let map = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]), true);
    let v = region_mean(map, &[1.0, 0.0, 0.0, 1.0]).unwrap().item();
    assert!((v - 2.5).abs() < 1e-15);
    let constant = tape.leaf(Tensor::full(&[9], 0.37), true);
    for mask in [
        vec![1.0; 9],
        vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
    ] {
        assert!((region_mean(constant, &mask).unwrap().item() - 0.37).abs() < 1e-15);
    }
    assert!(matches!(
        region_mean(map, &[0.0; 4]),
        Err(Error::EmptyRegion)
    ));
}

#[test]
fn topk_mean_examples() {
    let tape = Tape::new();
    let map = tape.leaf(Tensor::from_vec(vec![0.1, 0.9, 0.5, 0.3]), true);
    let all = [1.0; 4];
    assert!((topk_mean(map, &all, 2).unwrap().item() - 0.7).abs() < 1e-15);
    let mean = region_mean(map, &all).unwrap().item();
    for k in [4, 5, 100] {
        assert!((topk_mean(map, &all, k).unwrap().item() - mean).abs() < 1e-15);
    }
    let constant = tape.leaf(Tensor::full(&[6], 0.25), true);
    for k in 1..8 {
        assert!((topk_mean(constant, &[1.0; 6], k).unwrap().item() - 0.25).abs() < 1e-15);
    }
    assert!(matches!(
        topk_mean(map, &[0.0; 4], 2),
        Err(Error::EmptyRegion)
    ));
    // Only masked pixels compete.
    let masked = topk_mean(map, &[1.0, 0.0, 1.0, 1.0], 1).unwrap().item();
    assert_eq!(masked, 0.5);
}

#[test]
fn fas_baa_examples() {
    let tape = Tape::new();
    let v = 0.6;
    let mask = [1.0, 1.0, 0.0, 0.0];
    let s = stack(&tape, &[v, v, 0.2, 0.4], &mask);
    let (fas, _) = fas_baa(&s, &weights(0.0, 1.0, 100)).unwrap();
    assert!((fas.item() - v / (v + RATIO_EPS)).abs() < 1e-15);
    assert!((fas.item() - 1.0).abs() < 1e-5);

    let s = stack(&tape, &[0.2, 0.6, 0.9, 0.9], &mask);
    let (fas, baa) = fas_baa(&s, &weights(5.0, 0.0, 100)).unwrap();
    assert!((fas.item() - 2.0).abs() < 1e-12);
    assert!((baa.item() + 4.5).abs() < 1e-12);

    let s = stack(&tape, &[0.2, 0.6, 0.9, 0.1], &[1.0; 4]);
    let (_, baa) = fas_baa(&s, &LossWeights::default()).unwrap();
    assert_eq!(baa.item(), 0.0);

    let s = stack(&tape, &[0.2, 0.6, 0.9, 0.1], &[0.0; 4]);
    assert!(fas_baa(&s, &LossWeights::default()).is_err());
}

#[test]
fn fas_baa_closed_form() {
    // Small maps hit the top-k floor of 4.
    let w = weights(1.5, 0.7, 100);
    assert_eq!(w.effective_k(6), 4);
    let map: Vec<f64> = (0..36).map(|i| ((i * 7) % 36) as f64 / 35.0).collect();
    let mask: Vec<f64> = (0..36)
        .map(|i| if i % 3 == 0 { 1.0 } else { 0.0 })
        .collect();
    let tape = Tape::new();
    let (fas, baa) = fas_baa(&stack(&tape, &map, &mask), &w).unwrap();
    let term = |inside: bool| {
        let mut vals: Vec<f64> = map
            .iter()
            .zip(&mask)
            .filter(|(_, m)| (**m == 1.0) == inside)
            .map(|(v, _)| *v)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let phi = vals[..4].iter().sum::<f64>() / 4.0;
        1.5 * mean + 0.7 * phi / (mean + RATIO_EPS)
    };
    assert!((fas.item() - term(true)).abs() < 1e-12);
    assert!((baa.item() + term(false)).abs() < 1e-12);
}

#[test]
fn effective_k_rescaling() {
    let ks: Vec<usize> = [50, 100, 150, 200]
        .iter()
        .map(|&k| weights(5.0, 1.0, k).effective_k(128))
        .collect();
    assert_eq!(ks, vec![4, 4, 7, 9]);
    assert_eq!(weights(5.0, 1.0, 100).effective_k(608), 100);
}

#[test]
fn smooth_examples() {
    let m = unit_edge_pair(1.0);
    assert_eq!(m.edges.len(), 1);
    assert!((m.edges[0].length - 1.0).abs() < 1e-15);
    let tape = Tape::new();
    let uniform = tape.leaf(
        Tensor::new(vec![2, 3], vec![0.3, 0.2, 0.9, 0.3, 0.2, 0.9]).unwrap(),
        true,
    );
    assert_eq!(smooth_3d(uniform, &m).unwrap().item(), 0.0);
    let tex = tape.leaf(
        Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
        true,
    );
    assert!((smooth_3d(tex, &m).unwrap().item() - 1.0).abs() < 1e-15);
    let doubled = unit_edge_pair(2.0);
    assert!((smooth_3d(tex, &doubled).unwrap().item() - 2.0).abs() < 1e-15);
    let single = mesh("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n");
    let one = tape.leaf(Tensor::new(vec![1, 3], vec![0.1, 0.5, 0.9]).unwrap(), true);
    assert_eq!(smooth_3d(one, &single).unwrap().item(), 0.0);
}

#[test]
fn nps_examples() {
    let tape = Tape::new();
    let black = PrintablePalette::new(vec![[0.0; 3]]).unwrap();
    let white = tape.leaf(Tensor::new(vec![1, 3], vec![1.0; 3]).unwrap(), true);
    assert!((nps(white, &black).unwrap().item() - 3.0).abs() < 1e-15);

    let palette = PrintablePalette::default_palette();
    assert_eq!(palette.colors().len(), 30);
    let picks = [0, 7, 29];
    let data: Vec<f64> = picks.iter().flat_map(|&i| palette.colors()[i]).collect();
    let inside = tape.leaf(Tensor::new(vec![3, 3], data).unwrap(), true);
    assert_eq!(nps(inside, &palette).unwrap().item(), 0.0);
    assert!(PrintablePalette::new(vec![]).is_err());
}

#[test]
fn palette_file_format() {
    let p =
        PrintablePalette::parse("# comment\n0 0 0\n\n0.5 0.25 1\n", Path::new("p.txt")).unwrap();
    assert_eq!(p.colors(), &[[0.0, 0.0, 0.0], [0.5, 0.25, 1.0]]);
    assert!(PrintablePalette::parse("0 0\n", Path::new("p.txt")).is_err());
    assert!(PrintablePalette::parse("0 0 2\n", Path::new("p.txt")).is_err());
    assert!(PrintablePalette::parse("# nothing\n", Path::new("p.txt")).is_err());
}

#[test]
fn total_loss_examples() {
    let m = unit_edge_pair(1.0);
    let palette = PrintablePalette::default_palette();
    let tape = Tape::new();
    let map = [0.1, 0.8, 0.3, 0.6];
    let mask = [1.0, 0.0, 1.0, 0.0];
    let tex = tape.leaf(
        Tensor::new(vec![2, 3], vec![0.2, 0.4, 0.6, 0.9, 0.1, 0.3]).unwrap(),
        true,
    );
    let w = LossWeights {
        beta: 0.0,
        gamma: 0.0,
        ..LossWeights::default()
    };
    let s = stack(&tape, &map, &mask);
    let terms = total_loss(&s, tex, &m, &palette, &w).unwrap();
    assert_eq!(terms.total.item(), terms.fas.item() + terms.baa.item());

    let w = LossWeights::default();
    let b = total_loss(&s, tex, &m, &palette, &w)
        .unwrap()
        .breakdown(Some(tex))
        .unwrap();
    assert!((b.total - (b.fas + b.baa + w.beta * b.smooth + w.gamma * b.nps)).abs() < 1e-12);
    assert!(b.grad_norms.is_some());

    let only_beta = LossWeights {
        alpha1: 0.0,
        alpha2: 0.0,
        beta: 1.0,
        gamma: 0.0,
        ..LossWeights::default()
    };
    let uniform = tape.leaf(Tensor::new(vec![2, 3], vec![0.4; 6]).unwrap(), true);
    let t = total_loss(&s, uniform, &m, &palette, &only_beta).unwrap();
    assert_eq!(t.total.item(), 0.0);

    let bad = LossWeights {
        beta: -1.0,
        ..LossWeights::default()
    };
    assert!(total_loss(&s, tex, &m, &palette, &bad).is_err());
}

#[test]
fn disabled_items_contribute_zero() {
    let tape = Tape::new();
    let s = stack(&tape, &[0.1, 0.8, 0.3, 0.6], &[1.0, 0.0, 1.0, 0.0]);
    let m = unit_edge_pair(1.0);
    let tex = tape.leaf(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap(), true);
    let palette = PrintablePalette::default_palette();
    let fas_only = LossWeights {
        use_baa: false,
        ..LossWeights::default()
    };
    let t = total_loss(&s, tex, &m, &palette, &fas_only).unwrap();
    assert_eq!(t.baa.item(), 0.0);
    assert!(t.fas.item() > 0.0);
    let baa_only = LossWeights {
        use_fas: false,
        ..LossWeights::default()
    };
    let t = total_loss(&s, tex, &m, &palette, &baa_only).unwrap();
    assert_eq!(t.fas.item(), 0.0);
    assert!(t.baa.item() < 0.0);
}

fn region_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..40)
}

proptest! {
    #[test]
    fn ratio_is_at_least_one(values in region_values(), k in 1usize..50) {
        let tape = Tape::new();
        let n = values.len();
        let map = tape.leaf(Tensor::from_vec(values.clone()), true);
        let mask = vec![1.0; n];
        let mean = region_mean(map, &mask).unwrap().item();
        let phi = topk_mean(map, &mask, k).unwrap().item();
        prop_assert!(phi / (mean + RATIO_EPS) >= 1.0 - 1e-9 - RATIO_EPS / (mean + RATIO_EPS));
        prop_assert!(phi >= mean - 1e-12);
        if mean > 0.0 {
            prop_assert!(phi / mean >= 1.0 - 1e-9);
        }
    }

    #[test]
    fn ratio_is_one_on_constant_regions(v in 0.01f64..1.0, n in 1usize..30, k in 1usize..40) {
        let tape = Tape::new();
        let map = tape.leaf(Tensor::full(&[n], v), true);
        let mask = vec![1.0; n];
        let ratio = topk_mean(map, &mask, k).unwrap().item() / (region_mean(map, &mask).unwrap().item() + RATIO_EPS);
        prop_assert!((ratio - 1.0).abs() < 1e-4);
    }

    #[test]
    fn topk_is_permutation_invariant(values in region_values(), k in 1usize..50, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = values.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let tape = Tape::new();
        let mask = vec![1.0; values.len()];
        let a = topk_mean(tape.leaf(Tensor::from_vec(values), true), &mask, k).unwrap().item();
        let b = topk_mean(tape.leaf(Tensor::from_vec(shuffled), true), &mask, k).unwrap().item();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn fas_grows_and_baa_shrinks_with_alphas(
        map in prop::collection::vec(0.0f64..1.0, 16),
        bits in prop::collection::vec(any::<bool>(), 16),
        a1 in 0.0f64..10.0, a2 in 0.0f64..10.0, d1 in 0.0f64..5.0, d2 in 0.0f64..5.0,
    ) {
        let mut mask: Vec<f64> = bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        mask[0] = 1.0;
        mask[15] = 0.0;
        let tape = Tape::new();
        let s = stack(&tape, &map, &mask);
        let (f0, b0) = fas_baa(&s, &weights(a1, a2, 100)).unwrap();
        let (f1, b1) = fas_baa(&s, &weights(a1 + d1, a2 + d2, 100)).unwrap();
        prop_assert!(f1.item() >= f0.item() - 1e-12);
        prop_assert!(b1.item() <= b0.item() + 1e-12);
    }

    #[test]
    fn smooth_and_nps_ignore_face_order(colors in prop::collection::vec(0.0f64..1.0, 12), swap in any::<bool>()) {
        // A strip of four triangles; relabel by reversing the face list.
        let verts = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nv 0 2 0\nv 1 2 0\n";
        let faces = ["f 1 2 3", "f 2 4 3", "f 3 4 5", "f 4 6 5"];
        let forward = mesh(&format!("{verts}{}\n", faces.join("\n")));
        let mut rev = faces.to_vec();
        rev.reverse();
        let backward = mesh(&format!("{verts}{}\n", rev.join("\n")));
        let reordered: Vec<f64> = colors.chunks(3).rev().flatten().copied().collect();
        let palette = if swap {
            PrintablePalette::default_palette()
        } else {
            PrintablePalette::new(vec![[0.0; 3], [1.0; 3]]).unwrap()
        };
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![4, 3], colors).unwrap(), true);
        let b = tape.leaf(Tensor::new(vec![4, 3], reordered).unwrap(), true);
        prop_assert!((smooth_3d(a, &forward).unwrap().item() - smooth_3d(b, &backward).unwrap().item()).abs() < 1e-12);
        prop_assert!((nps(a, &palette).unwrap().item() - nps(b, &palette).unwrap().item()).abs() < 1e-12);
    }

    #[test]
    fn extra_palette_colour_never_raises_nps(colors in prop::collection::vec(0.0f64..1.0, 9), extra in prop::array::uniform3(0.0f64..1.0)) {
        let tape = Tape::new();
        let t = tape.leaf(Tensor::new(vec![3, 3], colors).unwrap(), true);
        let base = PrintablePalette::default_palette();
        let mut more = base.colors().to_vec();
        more.push(extra);
        let more = PrintablePalette::new(more).unwrap();
        prop_assert!(nps(t, &more).unwrap().item() <= nps(t, &base).unwrap().item() + 1e-12);
    }
}
