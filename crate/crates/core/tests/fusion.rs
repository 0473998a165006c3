#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use drax::attention::{attend, HeadWeights};
use drax::fusion::{
    cross_aligned_fuse, reconcile_rows, simple_concat_fuse, vector_space_transform, FusionParams,
};
use drax::params::{ParamBuilder, ParamStore};
use drax::{AttentionWeights, DistractionFactor, DistractionMask, ForwardCtx, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params(seed: u64, d: usize) -> (ParamStore, FusionParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fp = FusionParams::new(&mut ParamBuilder::new(&mut store, &mut rng), "fusion", d).unwrap();
    (store, fp)
}

fn align(store: &ParamStore, fp: &FusionParams, xa: &Mat, xt: &Mat, heads: usize, d_f: f64) -> Mat {
    let mut tape = Tape::new(store);
    let (a, t) = (tape.constant(tensor(xa)), tape.constant(tensor(xt)));
    let mut ctx = ForwardCtx::live();
    let out = vector_space_transform(&mut tape, &mut ctx, a, t, fp, heads, DistractionFactor::new(d_f).unwrap(), 1)
        .unwrap();
    rows(tape.value(out))
}

fn fuse(store: &ParamStore, fp: &FusionParams, xa: &Mat, xt: &Mat) -> Mat {
    let mut tape = Tape::new(store);
    let (a, t) = (tape.constant(tensor(xa)), tape.constant(tensor(xt)));
    let out = cross_aligned_fuse(&mut tape, a, t, fp).unwrap();
    rows(tape.value(out))
}

fn concat(store: &ParamStore, fp: &FusionParams, xa: &Mat, xt: &Mat) -> drax::Result<Mat> {
    let mut tape = Tape::new(store);
    let (a, t) = (tape.constant(tensor(xa)), tape.constant(tensor(xt)));
    let out = simple_concat_fuse(&mut tape, a, t, fp)?;
    Ok(rows(tape.value(out)))
}

fn set(store: &mut ParamStore, id: drax::ParamId, m: &Mat) {
    store.tensor_mut(id).data_mut().copy_from_slice(&m.concat());
}

/// `[I; 0]` or `[0; I]` of shape `[2d, d]`.
fn selector(d: usize, top: bool) -> Mat {
    (0..2 * d)
        .map(|r| (0..d).map(|c| if (top && r == c) || (!top && r == d + c) { 1.0 } else { 0.0 }).collect())
        .collect()
}

#[test]
fn aligned_row_is_the_masked_combination() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let w = AttentionWeights::new(Tensor::new(vec![1, 1, 3], vec![0.1, 0.25, 0.75]).unwrap(), 1.0).unwrap();
    let mask = DistractionMask::identify(&w, DistractionFactor::new(0.2).unwrap()).unwrap();
    let hw = HeadWeights {
        heads: vec![tape.constant(w.head(0))],
        snapshot: w.clone(),
    };
    let xt = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 4.0]];
    let v = tape.constant(tensor(&xt));
    let out = attend(&mut tape, &hw, v, Some(&mask)).unwrap();
    let want = [0.25 * 3.0 + 0.75 * 0.5, -0.25 + 0.75 * 4.0];
    assert_eq!(tape.value(out).data(), &want);
}

#[test]
fn five_tail_rows_align_to_two_anchor_rows() {
    let (store, fp) = params(1, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let out = align(&store, &fp, &random(&mut rng, 2, 8), &random(&mut rng, 5, 8), 2, 0.4);
    assert_eq!((out.len(), out[0].len()), (2, 8));
}

#[test]
fn zero_factor_alignment_matches_attention_oracle() {
    let (store, fp) = params(3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (xa, xt) = (random(&mut rng, 3, 6), random(&mut rng, 7, 6));
    let got = align(&store, &fp, &xa, &xt, 1, 0.0);
    let (wq, wk) = (p(&store, fp.wq), p(&store, fp.wk));
    let a = &head_weights(&xa, &xt, &wq, &wk, 1)[0];
    assert!(max_diff(&got, &mm(a, &xt)) < 1e-10);
    // and the multi-head masked version against the masked oracle
    let got = align(&store, &fp, &xa, &xt, 2, 0.4);
    assert!(max_diff(&got, &attention(&xa, &xt, &xt, &wq, &wk, 2, Some(0.4))) < 1e-10);
}

#[test]
fn single_head_zero_factor_rows_are_convex_combinations() {
    for seed in 0..20u64 {
        let (store, fp) = params(seed, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (xa, xt) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4));
        let got = align(&store, &fp, &xa, &xt, 1, 0.0);
        // xt is square and (almost surely) invertible: solve c · xt = row, check c ≥ 0 and Σc = 1.
        for row in &got {
            let c = solve_left(&xt, row);
            assert!(c.iter().all(|&v| v > -1e-9), "{c:?}");
            assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            let back: Vec<f64> = (0..4).map(|j| (0..3).map(|i| c[i] * xt[i][j]).sum()).collect();
            assert!(back.iter().zip(row).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }
}

/// Least-squares `c` with `c · x ≈ row` through the 3×3 normal equations.
fn solve_left(x: &Mat, row: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut a: Mat = (0..n)
        .map(|i| {
            let mut r: Vec<f64> = (0..n).map(|j| x[i].iter().zip(&x[j]).map(|(u, v)| u * v).sum()).collect();
            r.push(x[i].iter().zip(row).map(|(u, v)| u * v).sum());
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..=n {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

#[test]
fn projectors_recover_anchor_or_tail() {
    let (mut store, fp) = params(5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (xa, xt) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4));
    store.tensor_mut(fp.fuse.bias).data_mut().fill(0.0);
    set(&mut store, fp.fuse.weight, &selector(4, true));
    assert_eq!(fuse(&store, &fp, &xa, &xt), xa);
    set(&mut store, fp.fuse.weight, &selector(4, false));
    assert_eq!(fuse(&store, &fp, &xa, &xt), xt);
}

#[test]
fn fuse_matches_concat_then_matmul() {
    let (store, fp) = params(7, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (xa, xt) = (random(&mut rng, 4, 5), random(&mut rng, 4, 5));
    let want = affine(&store, &fp.fuse, &hcat(&[xa.clone(), xt.clone()]));
    assert!(max_diff(&fuse(&store, &fp, &xa, &xt), &want) < 1e-12);
    assert_eq!(concat(&store, &fp, &xa, &xt).unwrap(), fuse(&store, &fp, &xa, &xt));
}

#[test]
fn fuse_rejects_row_mismatch() {
    let (store, fp) = params(9, 4);
    let mut tape = Tape::new(&store);
    let a = tape.constant(Tensor::zeros(&[3, 4]));
    let t = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(cross_aligned_fuse(&mut tape, a, t, &fp).is_err());
}

#[test]
fn frame_groups_average_into_clips() {
    let (store, fp) = params(10, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (frames, clips) = (random(&mut rng, 128, 4), random(&mut rng, 8, 4));
    let mut tape = Tape::new(&store);
    let f = tape.constant(tensor(&frames));
    let r = reconcile_rows(&mut tape, f, 8).unwrap();
    let got = rows(tape.value(r));
    for (g, row) in got.iter().enumerate() {
        for c in 0..4 {
            let mean = (0..16).map(|k| frames[g * 16 + k][c]).sum::<f64>() / 16.0;
            assert!((row[c] - mean).abs() < 1e-12);
        }
    }
    let out = concat(&store, &fp, &clips, &frames).unwrap();
    let want = affine(&store, &fp.fuse, &hcat(&[clips.clone(), got]));
    assert!(max_diff(&out, &want) < 1e-12);
}

#[test]
fn short_tails_repeat_and_odd_counts_fail() {
    let (store, fp) = params(12, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut tape = Tape::new(&store);
    let t = tape.constant(tensor(&random(&mut rng, 2, 4)));
    let r = reconcile_rows(&mut tape, t, 6).unwrap();
    let v = rows(tape.value(r));
    assert_eq!(v[0], v[1]);
    assert_eq!(v[3], v[5]);
    assert!(concat(&store, &fp, &random(&mut rng, 5, 4), &random(&mut rng, 3, 4)).is_err());
}

#[test]
fn zero_weight_concat_gives_bias_rows() {
    let (mut store, fp) = params(14, 3);
    store.tensor_mut(fp.fuse.weight).data_mut().fill(0.0);
    store.tensor_mut(fp.fuse.bias).data_mut().copy_from_slice(&[1.0, -2.0, 0.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let out = concat(&store, &fp, &random(&mut rng, 4, 3), &random(&mut rng, 2, 3)).unwrap();
    assert!(out.iter().all(|r| r == &vec![1.0, -2.0, 0.5]));
}

#[test]
fn gradients_reach_anchor_and_tail() {
    let (store, fp) = params(16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (xa, xt) = (random(&mut rng, 3, 4), random(&mut rng, 5, 4));
    let readout = random(&mut rng, 3, 4);
    // Anchor and tail enter as parameters so the tape reports their gradients.
    let mut s = store.clone();
    let ia = s.add("xa", tensor(&xa)).unwrap();
    let it = s.add("xt", tensor(&xt)).unwrap();
    let run = |s: &ParamStore, ctx: &mut ForwardCtx| -> (f64, drax::params::Gradients) {
        let mut tape = Tape::new(s);
        let (a, t) = (tape.param(ia), tape.param(it));
        let al = vector_space_transform(&mut tape, ctx, a, t, &fp, 2, DistractionFactor::new(0.4).unwrap(), 1).unwrap();
        let f = cross_aligned_fuse(&mut tape, a, al, &fp).unwrap();
        let r = tape.constant(tensor(&readout));
        let prod = tape.matmul_nt(f, r).unwrap();
        let loss = tape.sum(prod);
        let v = tape.value(loss).data()[0];
        (v, tape.backward(loss).unwrap())
    };
    let mut rec = ForwardCtx::live().recording();
    let (_, grads) = run(&s, &mut rec);
    let masks = rec.take_recorded();
    let h = 1e-6;
    for id in [ia, it] {
        let g = grads.get(id).unwrap().to_vec();
        assert!(g.iter().any(|v| v.abs() > 1e-6));
        for k in 0..g.len() {
            let mut plus = s.clone();
            plus.tensor_mut(id).data_mut()[k] += h;
            let mut minus = s.clone();
            minus.tensor_mut(id).data_mut()[k] -= h;
            let fp_ = run(&plus, &mut ForwardCtx::replay(masks.clone())).0;
            let fm = run(&minus, &mut ForwardCtx::replay(masks.clone())).0;
            let num = (fp_ - fm) / (2.0 * h);
            assert!(rel_err(g[k], num, 1e-4) < 1e-5, "{} vs {num}", g[k]);
        }
    }
}
