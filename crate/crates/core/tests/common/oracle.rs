//! Scalar-loop oracles for the model maths, shared by the oracle tests and
//! the acceptance target. Each `check_*` returns the largest absolute
//! deviation between the implementation and its oracle.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mapnet::alignment::{dual_align, AlignmentParams};
use mapnet::attention::*;
use mapnet::heads::{classify, regress, HeadParams};
use mapnet::losses::*;
use mapnet::matcher::*;
use mapnet::params::ParamStore;
use mapnet::types::{BBox, BoxFrame, FeatureGrid, GridShape, TokenSequence};

pub const DEV: Device = Device::Cpu;

pub fn vals(v: &Var) -> Vec<f64> {
    v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn store() -> ParamStore {
    ParamStore::new(DType::F64, &DEV)
}

pub fn random(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn set(v: &Var, data: &[f64]) {
    let t = Tensor::from_slice(data, v.shape(), &DEV).unwrap();
    v.set(&t).unwrap();
}

pub fn tokens(data: &[f64], n: usize, d: usize) -> TokenSequence {
    TokenSequence::from_rows(data, n, d, DType::F64, &DEV).unwrap()
}

pub fn square_tokens(data: &[f64], side: usize, d: usize) -> TokenSequence {
    let t = tokens(data, side * side, d).into_tensor();
    TokenSequence::with_grid(t, GridShape::square(side)).unwrap()
}

pub fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= tol, "{what}[{i}]: {g} vs {w}");
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---- oracles on row-major data ----

/// `x (n x din) W (din x dout) + b`
pub fn linear_o(x: &[f64], n: usize, l: &Linear) -> Vec<f64> {
    let (w, b) = (vals(&l.weight), vals(&l.bias));
    let din = l.weight.dims()[0];
    let dout = l.weight.dims()[1];
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        for o in 0..dout {
            let mut acc = b[o];
            for k in 0..din {
                acc += x[i * din + k] * w[k * dout + o];
            }
            out[i * dout + o] = acc;
        }
    }
    out
}

pub fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Channel gate over `n` tokens of width `c`, one value per channel.
pub fn channel_gate_o(x: &[f64], n: usize, c: usize, p: &ChannelAttnParams) -> Vec<f64> {
    let (w1, w2) = (vals(&p.mlp_w1), vals(&p.mlp_w2));
    let hidden = c / p.reduction;
    let mlp = |pool: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; hidden];
        for j in 0..hidden {
            for i in 0..c {
                h[j] += pool[i] * w1[i * hidden + j];
            }
            h[j] = h[j].max(0.0);
        }
        let mut o = vec![0.0; c];
        for i in 0..c {
            for j in 0..hidden {
                o[i] += h[j] * w2[j * c + i];
            }
        }
        o
    };
    let mut mx = vec![f64::NEG_INFINITY; c];
    let mut av = vec![0.0; c];
    for t in 0..n {
        for i in 0..c {
            mx[i] = mx[i].max(x[t * c + i]);
            av[i] += x[t * c + i] / n as f64;
        }
    }
    let (a, b) = (mlp(&mx), mlp(&av));
    (0..c).map(|i| sigmoid(a[i] + b[i])).collect()
}

pub fn channel_attention_o(x: &[f64], n: usize, c: usize, p: &ChannelAttnParams) -> Vec<f64> {
    let g = channel_gate_o(x, n, c, p);
    (0..n * c).map(|k| x[k] * g[k % c]).collect()
}

/// Spatial gate over an `h x w` grid of width `c`, one value per cell.
pub fn spatial_gate_o(x: &[f64], h: usize, w: usize, c: usize, p: &SpatialAttnParams) -> Vec<f64> {
    let kern = vals(&p.conv_kernel);
    let bias = vals(&p.conv_bias)[0];
    let k = p.kernel_size;
    let r = (k / 2) as isize;
    let mut mx = vec![f64::NEG_INFINITY; h * w];
    let mut av = vec![0.0; h * w];
    for cell in 0..h * w {
        for ch in 0..c {
            mx[cell] = mx[cell].max(x[cell * c + ch]);
            av[cell] += x[cell * c + ch] / c as f64;
        }
    }
    let conv = |m: &[f64], row: usize, col: usize| -> f64 {
        let mut acc = bias;
        for di in 0..k {
            for dj in 0..k {
                let (yy, xx) = (row as isize + di as isize - r, col as isize + dj as isize - r);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    acc += kern[di * k + dj] * m[yy as usize * w + xx as usize];
                }
            }
        }
        acc
    };
    let mut g = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            g[row * w + col] = sigmoid(conv(&mx, row, col) + conv(&av, row, col));
        }
    }
    g
}

pub fn spatial_attention_o(x: &[f64], h: usize, w: usize, c: usize, p: &SpatialAttnParams) -> Vec<f64> {
    let g = spatial_gate_o(x, h, w, c, p);
    (0..h * w * c).map(|k| x[k] * g[k / c]).collect()
}

/// Explicit loop over heads, queries and keys. Returns the output and the
/// attention weights `[head][query][key]`.
pub fn mha_o(q: &[f64], nq: usize, k: &[f64], v: &[f64], nk: usize, p: &MultiHeadParams) -> (Vec<f64>, Vec<f64>) {
    let d = p.d_model;
    let (wq, wk, wv, wo) = (vals(&p.w_q), vals(&p.w_k), vals(&p.w_v), vals(&p.w_o));
    let hd = p.heads * p.d_k;
    let proj = |x: &[f64], i: usize, w: &[f64], col: usize| -> f64 { (0..d).map(|m| x[i * d + m] * w[m * hd + col]).sum() };
    let mut concat = vec![0.0; nq * hd];
    let mut weights = vec![0.0; p.heads * nq * nk];
    for h in 0..p.heads {
        for i in 0..nq {
            let mut scores = vec![0.0; nk];
            for j in 0..nk {
                let mut s = 0.0;
                for c in 0..p.d_k {
                    let col = h * p.d_k + c;
                    s += proj(q, i, &wq, col) * proj(k, j, &wk, col);
                }
                scores[j] = s / (p.d_k as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..nk {
                let a = e[j] / z;
                weights[(h * nq + i) * nk + j] = a;
                for c in 0..p.d_v {
                    let col = h * p.d_v + c;
                    concat[i * hd + col] += a * proj(v, j, &wv, col);
                }
            }
        }
    }
    let mut out = vec![0.0; nq * d];
    for i in 0..nq {
        for o in 0..d {
            out[i * d + o] = (0..hd).map(|m| concat[i * hd + m] * wo[m * d + o]).sum();
        }
    }
    (out, weights)
}

pub fn pe_o(h: usize, w: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for row in 0..h {
        for col in 0..w {
            for pos in [row, col] {
                for j in 0..d / 4 {
                    let a = pos as f64 / 10000f64.powf(4.0 * j as f64 / d as f64);
                    out.push(a.sin());
                    out.push(a.cos());
                }
            }
        }
    }
    out
}

pub fn ffn_o(x: &[f64], n: usize, p: &FfnParams) -> Vec<f64> {
    let hidden = relu(linear_o(x, n, &p.inner));
    add(x, &linear_o(&hidden, n, &p.outer))
}

pub fn layer_norm_o(x: &[f64], n: usize, d: usize, p: &LayerNorm) -> Vec<f64> {
    let (g, b) = (vals(&p.gamma), vals(&p.beta));
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for c in 0..d {
            out[i * d + c] = (row[c] - mean) / (var + LAYER_NORM_EPS).sqrt() * g[c] + b[c];
        }
    }
    out
}

pub fn attend_o(b: &AttentionBlock, qs: &[f64], nq: usize, kv: &[f64], nk: usize, pe_q: &[f64], pe_k: &[f64]) -> Vec<f64> {
    let q = add(&linear_o(qs, nq, &b.proj.q), pe_q);
    let k = add(&linear_o(kv, nk, &b.proj.k), pe_k);
    let v = linear_o(kv, nk, &b.proj.v);
    mha_o(&q, nq, &k, &v, nk, &b.mha).0
}

pub fn gate_o(g: &Gate, x: &[f64], side: usize, d: usize) -> Vec<f64> {
    match g {
        Gate::Identity => x.to_vec(),
        Gate::Channel(p) => channel_attention_o(x, side * side, d, p),
        Gate::Spatial(p) => spatial_attention_o(x, side, side, d, p),
    }
}

pub fn norm_o(x: Vec<f64>, n: usize, d: usize, ln: Option<&LayerNorm>) -> Vec<f64> {
    match ln {
        Some(l) => layer_norm_o(&x, n, d, l),
        None => x,
    }
}

/// Chained oracle of one matcher layer.
pub fn matcher_o(z: &[f64], sz: usize, x: &[f64], sx: usize, d: usize, p: &MatcherParams) -> (Vec<f64>, Vec<f64>) {
    let (nz, nx) = (sz * sz, sx * sx);
    let (pz, px) = (pe_o(sz, sz, d), pe_o(sx, sx, d));
    let ns = p.norms.as_ref();
    let sa_z = attend_o(&p.self_attn_z, z, nz, z, nz, &pz, &pz);
    let z1 = gate_o(&p.gate_z, &norm_o(add(z, &sa_z), nz, d, ns.map(|n| &n.self_z)), sz, d);
    let sa_x = attend_o(&p.self_attn_x, x, nx, x, nx, &px, &px);
    let x1 = gate_o(&p.gate_x, &norm_o(add(x, &sa_x), nx, d, ns.map(|n| &n.self_x)), sx, d);
    let ca = attend_o(&p.cross_attn, &x1, nx, &z1, nz, &px, &pz);
    let x2 = gate_o(&p.gate_cross, &norm_o(add(&x1, &ca), nx, d, ns.map(|n| &n.cross)), sx, d);
    let z_out = norm_o(ffn_o(&z1, nz, &p.ffn_z), nz, d, ns.map(|n| &n.ffn_z));
    let x_out = norm_o(ffn_o(&x2, nx, &p.ffn_x), nx, d, ns.map(|n| &n.ffn_x));
    (z_out, x_out)
}

pub fn dual_align_o(sc: &[f64], sp: &[f64], side: usize, d: usize, p: &AlignmentParams) -> (Vec<f64>, Vec<f64>) {
    let n = side * side;
    let pe = pe_o(side, side, d);
    let pe2 = [pe.clone(), pe.clone()].concat();
    let (nc, np) = match &p.norms {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    let sm = [sc, sp].concat();
    let uc = attend_o(&p.cross_attn_c, sc, n, &sm, 2 * n, &pe, &pe2);
    let sc_out = channel_attention_o(&norm_o(add(sc, &uc), n, d, nc), n, d, &p.gate_c);
    let sm2 = [sc_out.as_slice(), sp].concat();
    let up = attend_o(&p.cross_attn_p, sp, n, &sm2, 2 * n, &pe, &pe2);
    let sp_out = spatial_attention_o(&norm_o(add(sp, &up), n, d, np), side, side, d, &p.gate_p);
    (sc_out, sp_out)
}

pub fn head_o(x: &[f64], n: usize, p: &HeadParams) -> Vec<f64> {
    let h = relu(linear_o(x, n, &p.layers[0]));
    let h = relu(linear_o(&h, n, &p.layers[1]));
    linear_o(&h, n, &p.layers[2])
}


pub fn max_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "oracle length mismatch");
    got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max)
}

pub fn check_channel(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = store();
    let p = ChannelAttnParams::build(&mut s, "ca", 4, 2, &mut rng).unwrap();
    s.randomize(1.0, &mut rng).unwrap();
    let x = random(2 * 2 * 4, 2.0, &mut rng);
    let g = FeatureGrid::from_hwc(&x, 2, 2, 4, DType::F64, &DEV).unwrap();
    let got = channel_attention(&g, &p).unwrap().to_hwc(0).unwrap();
    max_err(&got, &channel_attention_o(&x, 4, 4, &p))
}

/// 4x4x2 input, 3x3 kernel of ones, zero bias.
pub fn check_spatial_ones(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = store();
    let p = SpatialAttnParams::build(&mut s, "sa", 3, &mut rng).unwrap();
    set(&p.conv_kernel, &[1.0; 9]);
    let x = random(4 * 4 * 2, 1.0, &mut rng);
    let g = FeatureGrid::from_hwc(&x, 4, 4, 2, DType::F64, &DEV).unwrap();
    let got = spatial_attention(&g, &p).unwrap().to_hwc(0).unwrap();
    max_err(&got, &spatial_attention_o(&x, 4, 4, 2, &p))
}

pub fn check_spatial_random(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = store();
    let p = SpatialAttnParams::build(&mut s, "sa", 5, &mut rng).unwrap();
    s.randomize(0.5, &mut rng).unwrap();
    let x = random(6 * 5 * 3, 1.0, &mut rng);
    let g = FeatureGrid::from_hwc(&x, 6, 5, 3, DType::F64, &DEV).unwrap();
    let got = spatial_attention(&g, &p).unwrap().to_hwc(0).unwrap();
    max_err(&got, &spatial_attention_o(&x, 6, 5, 3, &p))
}

/// q (2x8), k, v (3x8), two heads, small integer weights. Covers both the
/// output and the attention weights.
pub fn check_mha_integer(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = store();
    let p = MultiHeadParams::build(&mut s, "mha", 8, 2, &mut rng).unwrap();
    for (i, v) in [&p.w_q, &p.w_k, &p.w_v, &p.w_o].into_iter().enumerate() {
        let ints: Vec<f64> = (0..64).map(|j| ((j * 7 + i * 3) % 5) as f64 - 2.0).collect();
        set(v, &ints);
    }
    let q = random(2 * 8, 0.1, &mut rng);
    let k = random(3 * 8, 0.1, &mut rng);
    let v = random(3 * 8, 1.0, &mut rng);
    let out = multi_head_attention_with_weights(&tokens(&q, 2, 8), &tokens(&k, 3, 8), &tokens(&v, 3, 8), &p).unwrap();
    let (want, want_w) = mha_o(&q, 2, &k, &v, 3, &p);
    let w = out.weights.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    max_err(&out.output.to_rows(0).unwrap(), &want).max(max_err(&w, &want_w))
}

pub fn check_mha_random(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = store();
    let p = MultiHeadParams::build(&mut s, "mha", 16, 4, &mut rng).unwrap();
    let q = random(5 * 16, 1.0, &mut rng);
    let k = random(7 * 16, 1.0, &mut rng);
    let v = random(7 * 16, 1.0, &mut rng);
    let out = multi_head_attention(&tokens(&q, 5, 16), &tokens(&k, 7, 16), &tokens(&v, 7, 16), &p).unwrap();
    max_err(&out.to_rows(0).unwrap(), &mha_o(&q, 5, &k, &v, 7, &p).0)
}

pub fn check_pe(h: usize, w: usize, d: usize) -> f64 {
    let pe = positional_encoding(h, w, d, DType::F64, &DEV).unwrap();
    max_err(&pe.to_rows(0).unwrap(), &pe_o(h, w, d))
}

pub fn check_ffn(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = store();
    let p = FfnParams::build(&mut s, "ffn", 4, 8, &mut rng).unwrap();
    s.randomize(1.0, &mut rng).unwrap();
    let x = random(2 * 4, 1.0, &mut rng);
    let got = feed_forward(&tokens(&x, 2, 4), &p, None).unwrap().to_rows(0).unwrap();
    max_err(&got, &ffn_o(&x, 2, &p))
}

pub fn dims(d_ff: usize, heads: usize, kernel: usize) -> BlockDims {
    BlockDims {
        d_model: 8,
        heads,
        d_ff,
        reduction: 2,
        spatial_kernel: kernel,
    }
}

/// One matcher layer on `sz x sz` template and `sx x sx` search grids.
pub fn check_matcher(kind: GateKind, mode: NormalizationMode, sz: usize, sx: usize, heads: usize, kernel: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = store();
    let p = MatcherParams::build(&mut s, "m", kind, mode, &dims(16, heads, kernel), &mut rng).unwrap();
    s.randomize(0.5, &mut rng).unwrap();
    let z = random(sz * sz * 8, 1.0, &mut rng);
    let x = random(sx * sx * 8, 1.0, &mut rng);
    let (gz, gx) = matcher_layer(&square_tokens(&z, sz, 8), &square_tokens(&x, sx, 8), &p, kind, None).unwrap();
    let (wz, wx) = matcher_o(&z, sz, &x, sx, 8, &p);
    max_err(&gz.to_rows(0).unwrap(), &wz).max(max_err(&gx.to_rows(0).unwrap(), &wx))
}

pub fn check_stack(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = store();
    let cfg = MatcherStackConfig {
        depth: 3,
        gate_kind: GateKind::Spatial,
        normalization_mode: NormalizationMode::Literal,
    };
    let layers = build_stack(&mut s, "st", &cfg, &dims(16, 2, 3), &mut rng).unwrap();
    s.randomize(0.3, &mut rng).unwrap();
    let z = random(9 * 8, 1.0, &mut rng);
    let x = random(16 * 8, 1.0, &mut rng);
    let got = run_matcher_stack(&square_tokens(&z, 3, 8), &square_tokens(&x, 4, 8), &cfg, &layers, None).unwrap();
    let (mut wz, mut wx) = (z, x);
    for p in &layers {
        let (a, b) = matcher_o(&wz, 3, &wx, 4, 8, p);
        wz = a;
        wx = b;
    }
    max_err(&got.to_rows(0).unwrap(), &wx)
}

pub fn check_alignment(mode: NormalizationMode, side: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = store();
    let kernel = if side >= 3 { 3 } else { 1 };
    let p = AlignmentParams::build(&mut s, "al", mode, &dims(16, 1, kernel), &mut rng).unwrap();
    s.randomize(0.5, &mut rng).unwrap();
    let sc = random(side * side * 8, 1.0, &mut rng);
    let sp = random(side * side * 8, 1.0, &mut rng);
    let (gc, gp) = dual_align(&square_tokens(&sc, side, 8), &square_tokens(&sp, side, 8), &p).unwrap();
    let (wc, wp) = dual_align_o(&sc, &sp, side, 8, &p);
    max_err(&gc.to_rows(0).unwrap(), &wc).max(max_err(&gp.to_rows(0).unwrap(), &wp))
}

/// Two tokens, integer weights and biases.
pub fn check_classifier(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = store();
    let p = HeadParams::build(&mut s, "cls", 4, 6, 2, &mut rng).unwrap();
    for (li, l) in p.layers.iter().enumerate() {
        let n = l.weight.elem_count();
        set(&l.weight, &(0..n).map(|j| ((j + li) % 3) as f64 - 1.0).collect::<Vec<_>>());
        let nb = l.bias.elem_count();
        set(&l.bias, &(0..nb).map(|j| (j % 2) as f64).collect::<Vec<_>>());
    }
    let x = [1.0, -2.0, 0.5, 3.0, 0.0, 1.5, -1.0, 2.0];
    let got = classify(&tokens(&x, 2, 4), &p).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    max_err(&got, &head_o(&x, 2, &p))
}

pub fn check_regressor(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = store();
    let p = HeadParams::build(&mut s, "reg", 8, 5, 4, &mut rng).unwrap();
    s.randomize(0.7, &mut rng).unwrap();
    let x = random(3 * 8, 1.0, &mut rng);
    let got = regress(&tokens(&x, 3, 8), &p).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let want: Vec<f64> = head_o(&x, 3, &p).into_iter().map(sigmoid).collect();
    max_err(&got, &want)
}

/// Classification loss written out term by term.
pub fn cls_oracle(probs: &[[f64; 2]], weights_pos: &[f64], labels: &[bool], beta: f64) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut pos_i = 0;
    let mut acc = 0.0;
    for (p, &l) in probs.iter().zip(labels) {
        if l {
            acc += weights_pos[pos_i] * -p[0].ln();
            pos_i += 1;
        } else {
            acc += beta * -p[1].ln();
        }
    }
    acc / (n_pos + beta * n_neg)
}

/// Two positives with IoU 0.5 and 1.0 (weights 2/3 and 4/3), two negatives.
pub fn check_cls_loss() -> f64 {
    let gt = BBox::from_corners(0.0, 0.0, 1.0, 1.0, BoxFrame::NormalizedSearch);
    let boxes = [[0.0, 0.0, 0.5, 1.0], [0.0, 0.0, 1.0, 1.0], [0.2, 0.2, 0.3, 0.3], [0.0, 0.0, 0.1, 0.1]];
    let probs = [[0.7, 0.3], [0.9, 0.1], [0.4, 0.6], [0.2, 0.8]];
    let labels = LabelAssignment::from_labels(vec![true, true, false, false]);
    let w = LossWeights::default();
    let pw = precision_weights(&boxes, &gt, &labels);
    let got = pg_cls_loss_probs(&probs, &boxes, &gt, &labels, &w, ClsLossKind::PrecisionGuided).unwrap();
    let want = cls_oracle(&probs, &[2.0 / 3.0, 4.0 / 3.0], &labels.labels, w.beta);
    max_err(&pw, &[2.0 / 3.0, 4.0 / 3.0]).max((got - want).abs())
}

/// Regression loss written out term by term with explicit confidence weights.
pub fn reg_oracle(probs: &[[f64; 2]], boxes: &[[f64; 4]], gt: &BBox, labels: &[bool], w: &LossWeights) -> f64 {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mean_y = pos.iter().map(|&i| probs[i][0]).sum::<f64>() / pos.len() as f64;
    let g = gt.as_array();
    pos.iter()
        .map(|&i| {
            let b = boxes[i];
            let bb = BBox::from_corners(b[0], b[1], b[2], b[3], gt.frame);
            let l1: f64 = (0..4).map(|k| (b[k] - g[k]).abs()).sum();
            probs[i][0] / mean_y * (w.lambda_giou * giou_loss(&bb, gt).unwrap() + w.lambda_l1 * l1)
        })
        .sum::<f64>()
        / pos.len() as f64
}

/// Single positive b = (0,0,0.5,1) against (0,0,1,1): 2 * 0.5 + 5 * 0.5.
pub fn check_reg_loss_by_hand() -> f64 {
    let gt = BBox::from_corners(0.0, 0.0, 1.0, 1.0, BoxFrame::NormalizedSearch);
    let boxes = [[0.0, 0.0, 0.5, 1.0], [0.3, 0.3, 0.4, 0.4]];
    let probs = [[0.6, 0.4], [0.1, 0.9]];
    let labels = LabelAssignment::from_labels(vec![true, false]);
    let got = cg_reg_loss_probs(&probs, &boxes, &gt, &labels, &LossWeights::default(), RegLossKind::ConfidenceGuided).unwrap();
    (got - 3.5).abs()
}

pub fn check_reg_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = BBox::from_corners(0.2, 0.3, 0.7, 0.8, BoxFrame::NormalizedSearch);
    let n = 12;
    let boxes: Vec<[f64; 4]> = (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.5));
            [x, y, x + rng.random_range(0.1..0.5), y + rng.random_range(0.1..0.5)]
        })
        .collect();
    let probs: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let p = rng.random_range(0.05..0.95);
            [p, 1.0 - p]
        })
        .collect();
    let labels: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
    let la = LabelAssignment::from_labels(labels.clone());
    let w = LossWeights::default();
    let got = cg_reg_loss_probs(&probs, &boxes, &gt, &la, &w, RegLossKind::ConfidenceGuided).unwrap();
    (got - reg_oracle(&probs, &boxes, &gt, &labels, &w)).abs()
}

/// `(label, deviation, tolerance)` for every oracle check.
pub fn equation_suite() -> Vec<(&'static str, f64, f64)> {
    use GateKind::*;
    use NormalizationMode::*;
    vec![
        ("channel attention", check_channel(1), 1e-10),
        ("spatial attention, ones kernel", check_spatial_ones(3), 1e-10),
        ("spatial attention, random kernel", check_spatial_random(4), 1e-10),
        ("multi-head attention, integer weights", check_mha_integer(6), 1e-8),
        ("multi-head attention, random weights", check_mha_random(7), 1e-8),
        ("positional encoding", check_pe(2, 2, 8).max(check_pe(3, 5, 32)), 1e-10),
        ("feed-forward", check_ffn(8), 1e-10),
        ("category-aware matcher", check_matcher(Channel, Literal, 2, 3, 1, 1, 10), 1e-8),
        ("spatial-aware matcher", check_matcher(Spatial, Literal, 3, 4, 2, 3, 11), 1e-8),
        ("base matcher", check_matcher(None, Literal, 2, 3, 2, 1, 12), 1e-8),
        ("matcher stack", check_stack(15), 1e-8),
        ("dual alignment", check_alignment(Literal, 2, 20).max(check_alignment(Literal, 3, 21)), 1e-8),
        ("classification head", check_classifier(30), 1e-10),
        ("regression head", check_regressor(31), 1e-10),
        ("precision-guided classification loss", check_cls_loss(), 1e-10),
        ("confidence-guided regression loss", check_reg_loss_by_hand().max(check_reg_loss(40)), 1e-10),
    ]
}
