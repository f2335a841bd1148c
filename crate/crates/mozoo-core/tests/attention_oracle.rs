//! Oracle equivalence and isolation properties of the two attention paths.

mod common;

use common::{assert_grads_match, finite_diff, randn};
use mozoo_core::attention::{
    blockwise_attention, build_ada_mask, count_attended_pairs, dense_masked_attention,
    SegmentLayout,
};
use mozoo_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;
use std::sync::Arc;

fn random_layout(rng: &mut impl Rng) -> SegmentLayout {
    SegmentLayout::new(
        rng.gen_range(1..=4),
        rng.gen_range(1..=6),
        rng.gen_range(1..=6),
        rng.gen_range(1..=16),
        rng.gen_range(1..=3),
    )
    .unwrap()
}

fn qkv_for(layout: &SegmentLayout, heads: usize, dh: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let l = layout.total_len();
    (
        randn(&[l, heads, dh], seed, "attn-q"),
        randn(&[l, heads, dh], seed, "attn-k"),
        randn(&[l, heads, dh], seed, "attn-v"),
    )
}

#[test]
fn blockwise_matches_dense_oracle_on_30_random_instances() {
    let mut rng = mozoo_core::rng::substream(42, "layouts");
    for trial in 0..30u64 {
        let layout = random_layout(&mut rng);
        let heads = rng.gen_range(1..=3);
        let dh = 2 * rng.gen_range(1..=4);
        let (q, k, v) = qkv_for(&layout, heads, dh, trial);
        let dense = dense_masked_attention(&q, &k, &v, &build_ada_mask(&layout).unwrap().to_dense())
            .unwrap();
        let block = blockwise_attention(&q, &k, &v, &layout).unwrap();
        let diff = dense.max_abs_diff(&block).unwrap();
        assert!(diff < 1e-5, "trial {trial}: max abs diff {diff}");
    }
}

/// Rows of a segment in a [L, H, dh] tensor.
fn rows(t: &Tensor, start: usize, len: usize) -> &[f32] {
    let row = t.numel() / t.shape()[0];
    &t.data()[start * row..(start + len) * row]
}

#[test]
fn guidance_outputs_ignore_target_perturbations() {
    let mut rng = mozoo_core::rng::substream(7, "unidir");
    for trial in 0..20u64 {
        let layout = random_layout(&mut rng);
        let (q, k, v) = qkv_for(&layout, 2, 6, 100 + trial);
        let base = blockwise_attention(&q, &k, &v, &layout).unwrap();

        // perturb every target q/k/v row
        let perturb = |t: &Tensor| {
            let mut p = t.clone();
            let row = t.numel() / t.shape()[0];
            for v in &mut p.data_mut()[..layout.target_len() * row] {
                *v += 3.5;
            }
            p
        };
        let out = blockwise_attention(&perturb(&q), &perturb(&k), &perturb(&v), &layout).unwrap();
        let off = layout.mesh_offset();
        let len = layout.total_len() - off;
        assert_eq!(
            rows(&base, off, len),
            rows(&out, off, len),
            "trial {trial}: guidance rows must be bit-identical"
        );
    }
}

#[test]
fn target_outputs_are_frame_local_in_mesh_keys() {
    let layout = SegmentLayout::new(2, 4, 4, 16, 2).unwrap();
    let (q, k, v) = qkv_for(&layout, 2, 8, 9);
    let base = blockwise_attention(&q, &k, &v, &layout).unwrap();

    // perturb one mesh key/value in frame 1
    let s = layout.tokens_per_frame();
    let target_row = layout.mesh_offset() + s + 3;
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    let row = k.numel() / k.shape()[0];
    for val in &mut k2.data_mut()[target_row * row..(target_row + 1) * row] {
        *val += 2.0;
    }
    for val in &mut v2.data_mut()[target_row * row..(target_row + 1) * row] {
        *val -= 1.0;
    }
    let out = blockwise_attention(&q, &k2, &v2, &layout).unwrap();

    // frame-0 target rows bit-identical, frame-1 target rows changed
    assert_eq!(rows(&base, 0, s), rows(&out, 0, s));
    assert_ne!(rows(&base, s, s), rows(&out, s, s));
}

#[test]
fn mask_forms_denote_the_same_relation() {
    let mut rng = mozoo_core::rng::substream(3, "forms");
    for _ in 0..10 {
        let layout = random_layout(&mut rng);
        let mask = build_ada_mask(&layout).unwrap();
        let dense = mask.to_dense();
        assert_eq!(mask.popcount(), dense.popcount());
        for q in 0..layout.total_len() {
            let ranges = mask.row_ranges(q).unwrap();
            for key in 0..layout.total_len() {
                let in_ranges = ranges.iter().any(|r| r.contains(&key));
                assert_eq!(in_ranges, dense.allows(q, key));
            }
        }
    }
}

#[test]
fn sparsity_is_strict_for_two_or_more_frames() {
    let mut rng = mozoo_core::rng::substream(4, "sparsity");
    for _ in 0..20 {
        let mut layout = random_layout(&mut rng);
        layout.frames = rng.gen_range(2..=4);
        let l = layout.total_len() as u64;
        assert!(count_attended_pairs(&layout).unwrap() < l * l);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]
    #[test]
    fn closed_form_count_equals_mask_popcount(
        frames in 1usize..=4,
        grid_h in 1usize..=6,
        grid_w in 1usize..=6,
        mask_tokens in 1usize..=36,
        ref_frames in 1usize..=4,
    ) {
        let layout = SegmentLayout::new(frames, grid_h, grid_w, mask_tokens, ref_frames).unwrap();
        let mask = build_ada_mask(&layout).unwrap();
        prop_assert_eq!(count_attended_pairs(&layout).unwrap(), mask.to_dense().popcount());
    }
}

#[test]
fn both_attention_backwards_match_finite_differences() {
    // tiny instance, L = 2*2*2 + 2 + 2 = 12 <= 24
    let layout = SegmentLayout::new(2, 1, 2, 2, 1).unwrap();
    let l = layout.total_len();
    let (heads, dh) = (2, 4);
    let q0 = randn(&[l, heads, dh], 11, "bk-q");
    let k0 = randn(&[l, heads, dh], 11, "bk-k");
    let v0 = randn(&[l, heads, dh], 11, "bk-v");
    let w = randn(&[l, heads, dh], 11, "bk-w");
    let block_mask = Arc::new(build_ada_mask(&layout).unwrap());
    let dense_mask = Arc::new(build_ada_mask(&layout).unwrap().to_dense());

    for use_dense in [false, true] {
        let build = |q: &Tensor, k: &Tensor, v: &Tensor| {
            let mut g = Graph::new();
            let qn = g.param("q", q);
            let kn = g.param("k", k);
            let vn = g.param("v", v);
            let out = if use_dense {
                g.attn_dense(qn, kn, vn, Arc::clone(&dense_mask)).unwrap()
            } else {
                g.attn_block(qn, kn, vn, Arc::clone(&block_mask)).unwrap()
            };
            let wl = g.leaf(w.clone());
            let weighted = g.mul(out, wl).unwrap();
            // mean keeps the loss O(1) so f32 evaluation noise stays far
            // below the finite-difference tolerance
            let loss = g.mean(weighted);
            (g, loss)
        };
        let (g, loss) = build(&q0, &k0, &v0);
        let grads = g.backward(loss).unwrap();
        let path = if use_dense { "dense" } else { "blockwise" };

        for (name, base) in [("q", &q0), ("k", &k0), ("v", &v0)] {
            let fd = finite_diff(
                |x| {
                    let probe = Tensor::new(&[l, heads, dh], x.to_vec()).unwrap();
                    let (q, k, v) = match name {
                        "q" => (&probe, &k0, &v0),
                        "k" => (&q0, &probe, &v0),
                        _ => (&q0, &k0, &probe),
                    };
                    let (g, loss) = build(q, k, v);
                    g.value(loss).item().unwrap() as f64
                },
                base.data(),
                1e-3,
            );
            assert_grads_match(
                grads.get(name).unwrap().data(),
                &fd,
                &format!("{path} attention d{name}"),
            );
        }
    }
}

#[test]
fn attention_paths_agree_after_shared_backward() {
    // gradients of the two paths agree with each other as well
    let layout = SegmentLayout::new(2, 1, 2, 2, 1).unwrap();
    let l = layout.total_len();
    let q0 = randn(&[l, 2, 4], 13, "eq-q");
    let k0 = randn(&[l, 2, 4], 13, "eq-k");
    let v0 = randn(&[l, 2, 4], 13, "eq-v");
    let block_mask = Arc::new(build_ada_mask(&layout).unwrap());
    let dense_mask = Arc::new(build_ada_mask(&layout).unwrap().to_dense());
    let run = |dense: bool| {
        let mut g = Graph::new();
        let qn = g.param("q", &q0);
        let kn = g.param("k", &k0);
        let vn = g.param("v", &v0);
        let out = if dense {
            g.attn_dense(qn, kn, vn, Arc::clone(&dense_mask)).unwrap()
        } else {
            g.attn_block(qn, kn, vn, Arc::clone(&block_mask)).unwrap()
        };
        let sq = g.mul(out, out).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        grads.get("q").unwrap().clone()
    };
    let dq_dense = run(true);
    let dq_block = run(false);
    assert!(dq_dense.max_abs_diff(&dq_block).unwrap() < 1e-5);
}
