//! Plain-loop reference implementations used as oracles by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use drax::attention::{AffineParams, CrossEncoderParams, LayerNormParams, SelfEncoderParams};
use drax::params::{ParamId, ParamStore};
use drax::Tensor;
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Mat {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn random(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
    (0..r)
        .map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    assert_eq!(a[0].len(), k);
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

pub fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(b).map(|(u, v)| u + v).collect())
        .collect()
}

pub fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn hcat(parts: &[Mat]) -> Mat {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

pub fn softmax(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn layer_norm(a: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = (var + eps).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / s * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

pub fn elu(a: &Mat) -> Mat {
    a.iter()
        .map(|r| r.iter().map(|&v| if v >= 0.0 { v } else { v.exp() - 1.0 }).collect())
        .collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(u, v)| (u - v).abs())
        })
        .fold(0.0, f64::max)
}

pub fn p(store: &ParamStore, id: ParamId) -> Mat {
    rows(store.tensor(id))
}

pub fn pv(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.tensor(id).data().to_vec()
}

pub fn affine(store: &ParamStore, a: &AffineParams, x: &Mat) -> Mat {
    add_bias(&mm(x, &p(store, a.weight)), &pv(store, a.bias))
}

pub fn ln(store: &ParamStore, n: &LayerNormParams, x: &Mat, eps: f64) -> Mat {
    layer_norm(x, &pv(store, n.gain), &pv(store, n.bias), eps)
}

/// Per-head weights `[h][i][j]` of softmax(Q_h K_hᵀ / sqrt(d/h)).
pub fn head_weights(xq: &Mat, xk: &Mat, wq: &Mat, wk: &Mat, heads: usize) -> Vec<Mat> {
    let q = mm(xq, wq);
    let k = mm(xk, wk);
    let d = q[0].len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    (0..heads)
        .map(|h| {
            q.iter()
                .map(|qi| {
                    let s: Vec<f64> = k
                        .iter()
                        .map(|kj| (0..dh).map(|c| qi[h * dh + c] * kj[h * dh + c]).sum::<f64>() * scale)
                        .collect();
                    softmax(&s)
                })
                .collect()
        })
        .collect()
}

/// Zeroes entries strictly below `d_f` times their row maximum.
pub fn mask_rows(a: &Mat, d_f: f64) -> Mat {
    a.iter()
        .map(|r| {
            let rho = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let tau = rho * d_f;
            r.iter().map(|&v| if v < tau { 0.0 } else { v }).collect()
        })
        .collect()
}

/// Masked multi-head attention with values sliced per head.
pub fn attention(xq: &Mat, xk: &Mat, v: &Mat, wq: &Mat, wk: &Mat, heads: usize, d_f: Option<f64>) -> Mat {
    let dh = v[0].len() / heads;
    let parts: Vec<Mat> = head_weights(xq, xk, wq, wk, heads)
        .into_iter()
        .enumerate()
        .map(|(h, a)| {
            let a = match d_f {
                Some(f) => mask_rows(&a, f),
                None => a,
            };
            mm(&a, &cols(v, h * dh, dh))
        })
        .collect();
    hcat(&parts)
}

pub fn self_encoder(store: &ParamStore, sp: &SelfEncoderParams, x: &Mat, heads: usize, eps: f64) -> Mat {
    let v = mm(x, &p(store, sp.wv));
    let att = attention(x, x, &v, &p(store, sp.wq), &p(store, sp.wk), heads, None);
    let att = mm(&att, &p(store, sp.wo));
    let h1 = ln(store, &sp.norm1, &add(x, &att), eps);
    let f = elu(&affine(store, &sp.ffn_in, &h1));
    let f = affine(store, &sp.ffn_out, &f);
    ln(store, &sp.norm2, &add(&h1, &f), eps)
}

pub fn cross_layer(
    store: &ParamStore,
    cp: &CrossEncoderParams,
    x1: &Mat,
    x2: &Mat,
    heads: usize,
    d_f: Option<f64>,
    eps: f64,
) -> (Mat, Mat) {
    let [s1, s2] = &cp.streams;
    let p1 = affine(store, &s1.project, &ln(store, &s1.norm, x1, eps));
    let p2 = affine(store, &s2.project, &ln(store, &s2.norm, x2, eps));
    let (wq, wk) = (p(store, cp.wq), p(store, cp.wk));
    let v1 = mm(&p1, &p(store, s1.wv));
    let v2 = mm(&p2, &p(store, s2.wv));
    let c1 = attention(&p1, &p2, &v2, &wq, &wk, heads, d_f);
    let c2 = attention(&p2, &p1, &v1, &wq, &wk, heads, d_f);
    (
        add(x1, &affine(store, &s1.back, &c1)),
        add(x2, &affine(store, &s2.back, &c2)),
    )
}

/// Relative error with an absolute floor so near-zero gradients compare sensibly.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Random bundle with the given row counts `[appearance, motion, question, answer]`.
pub fn bundle(rng: &mut impl Rng, c: &drax::DraxConfig, lens: [usize; 4], label: usize) -> drax::FeatureBundle {
    let t = |rng: &mut _, r, w| tensor(&random(rng, r, w));
    drax::FeatureBundle {
        appearance: t(rng, lens[0], c.dim_appearance),
        motion: t(rng, lens[1], c.dim_motion),
        question: t(rng, lens[2], c.dim_question),
        answers: std::array::from_fn(|_| t(rng, lens[3], c.dim_answer)),
        label,
    }
}

/// Worst relative error of every parameter gradient against central differences,
/// with the distraction masks of the unperturbed pass held fixed. Entries
/// below `floor` in magnitude are compared absolutely against `floor`.
/// Returns the worst error and how many entries were compared relatively.
pub fn gradient_check(model: &drax::DraxModel, b: &drax::FeatureBundle, h: f64, floor: f64) -> (f64, usize) {
    use drax::ForwardCtx;
    let mut rec = ForwardCtx::live().recording();
    let (_, grads) = model.sample_gradients(&mut rec, b).unwrap();
    let masks = rec.take_recorded();
    let mut m = model.clone();
    let ids: Vec<ParamId> = m.store.iter().map(|(id, _)| id).collect();
    let (mut worst, mut large) = (0.0f64, 0);
    for id in ids {
        let n = m.store.tensor(id).len();
        let g = grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for k in 0..n {
            let orig = m.store.tensor(id).data()[k];
            let mut at = |v: f64| {
                m.store.tensor_mut(id).data_mut()[k] = v;
                m.sample_loss(&mut ForwardCtx::replay(masks.clone()), b).unwrap().loss
            };
            let (up, down) = (at(orig + h), at(orig - h));
            m.store.tensor_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(g[k], fd, floor));
            large += usize::from(g[k].abs().max(fd.abs()) >= floor);
        }
    }
    (worst, large)
}
