//! Straight-line reference implementations, synthetic data, and the
//! comparisons of library blocks against those references.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use dlf_core::data::{EncodedData, FeatureSchema, FieldDef, FieldKind};
use dlf_core::naf::{self, AttentionRound, NafParams};
use dlf_core::rli::{self, DenseParams};
use dlf_core::tensor::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

pub fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `relu(x W^T + b)` or, without `act`, the affine map alone.
pub fn dense(x: &Mat, w: &Mat, b: &[f64], act: bool) -> Mat {
    x.iter()
        .map(|row| {
            w.iter()
                .zip(b)
                .map(|(wr, bo)| {
                    let mut s = *bo;
                    for j in 0..row.len() {
                        s += row[j] * wr[j];
                    }
                    if act {
                        relu(s)
                    } else {
                        s
                    }
                })
                .collect()
        })
        .collect()
}

pub fn bilinear(a: &Mat, b: &Mat, inner: &Mat, outer: &Mat, bias: &[f64]) -> Mat {
    let (n, d) = (a.len(), a[0].len());
    let mut kernel = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            for row in inner {
                kernel[i][j] += row[i] * row[j];
            }
        }
    }
    let mut scores = vec![vec![0.0; n]; n];
    for p in 0..n {
        for q in 0..n {
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    s += a[p][i] * kernel[i][j] * b[q][j];
                }
            }
            scores[p][q] = s / (d as f64).sqrt();
        }
    }
    let mut h = vec![vec![0.0; d]; n];
    for p in 0..n {
        for j in 0..d {
            for q in 0..n {
                h[p][j] += scores[p][q] * b[q][j];
            }
            h[p][j] /= n as f64;
        }
    }
    dense(&h, outer, bias, true)
}

pub fn attend(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let d = q[0].len();
    q.iter()
        .map(|qr| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kr| qr.iter().zip(kr).map(|(x, y)| x * y).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let total: f64 = exps.iter().sum();
            (0..v[0].len()).map(|c| exps.iter().zip(v).map(|(e, vr)| e / total * vr[c]).sum()).collect()
        })
        .collect()
}

fn hcat(parts: &[&Mat]) -> Mat {
    (0..parts[0].len()).map(|r| parts.iter().flat_map(|p| p[r].iter().copied()).collect()).collect()
}

pub fn cross(q: &Mat, x: (&Mat, &Mat), y: (&Mat, &Mat), w: &Mat, b: &[f64]) -> Mat {
    let from_x = attend(q, x.0, x.1);
    let from_y = attend(q, y.0, y.1);
    dense(&hcat(&[&from_x, &from_y]), w, b, true)
}

#[derive(Clone, Debug)]
pub struct DenseW {
    pub w: Mat,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RoundW {
    pub qkv: [DenseW; 3],
    pub cross: [DenseW; 3],
}

#[derive(Clone, Debug)]
pub struct NafW {
    pub rounds: Vec<RoundW>,
    pub fuse: DenseW,
    pub project: DenseW,
    pub with_self: bool,
}

pub fn random_dense(rng: &mut impl Rng, out: usize, inp: usize, scale: f64) -> DenseW {
    DenseW { w: random_mat(rng, out, inp, scale), b: random_vec(rng, out, scale) }
}

pub fn random_naf(rng: &mut impl Rng, d: usize, rounds: usize, with_self: bool) -> NafW {
    let s = 0.6;
    NafW {
        rounds: (0..rounds)
            .map(|_| RoundW {
                qkv: std::array::from_fn(|_| random_dense(rng, 3 * d, d, s)),
                cross: std::array::from_fn(|_| random_dense(rng, d, 2 * d, s)),
            })
            .collect(),
        fuse: random_dense(rng, d, 3 * d, s),
        project: random_dense(rng, d, 4 * d, s),
        with_self,
    }
}

pub fn naf(blocks: [&Mat; 3], p: &NafW) -> Mat {
    let d = blocks[0][0].len();
    let mut cur: [Mat; 3] = [blocks[0].clone(), blocks[1].clone(), blocks[2].clone()];
    for round in &p.rounds {
        let proj: Vec<(Mat, Mat, Mat)> = (0..3)
            .map(|m| {
                let all = dense(&cur[m], &round.qkv[m].w, &round.qkv[m].b, false);
                let cut = |lo: usize| all.iter().map(|r| r[lo..lo + d].to_vec()).collect::<Mat>();
                (cut(0), cut(d), cut(2 * d))
            })
            .collect();
        let pairs = [(1, 2), (0, 2), (0, 1)];
        let next: Vec<Mat> = (0..3)
            .map(|m| {
                let (x, y) = pairs[m];
                let mut u = cross(
                    &proj[m].0,
                    (&proj[x].1, &proj[x].2),
                    (&proj[y].1, &proj[y].2),
                    &round.cross[m].w,
                    &round.cross[m].b,
                );
                if p.with_self {
                    let own = attend(&proj[m].0, &proj[m].1, &proj[m].2);
                    for (ur, or) in u.iter_mut().zip(&own) {
                        for (a, b) in ur.iter_mut().zip(or) {
                            *a += b;
                        }
                    }
                }
                u
            })
            .collect();
        cur = [next[0].clone(), next[1].clone(), next[2].clone()];
    }
    let att = dense(&hcat(&[&cur[0], &cur[1], &cur[2]]), &p.fuse.w, &p.fuse.b, true);
    dense(&hcat(&[blocks[0], blocks[1], blocks[2], &att]), &p.project.w, &p.project.b, false)
}

/// O(n^2) pairwise AUC: a positive above a negative counts 1, a tie 1/2.
pub fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] < 0.5 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] > 0.5 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn schema(n_fields: usize, vocab: usize) -> FeatureSchema {
    FeatureSchema {
        label_column: "label".into(),
        fields: (0..n_fields)
            .map(|i| FieldDef { name: format!("f{i}"), kind: FieldKind::Categorical, vocab_size: vocab })
            .collect(),
    }
}

/// Labels drawn from a hidden logistic model with per-token weights and one
/// pairwise interaction, so that the signal is learnable.
pub fn synthetic(rows: usize, n_fields: usize, vocab: usize, seed: u64) -> EncodedData {
    let mut r = rng(seed);
    let weights: Vec<Vec<f64>> = (0..n_fields).map(|_| (0..vocab).map(|_| r.random_range(-1.5..1.5)).collect()).collect();
    let mut ids = Vec::with_capacity(rows * n_fields);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let row: Vec<u32> = (0..n_fields).map(|_| r.random_range(1..vocab as u32)).collect();
        let mut z: f64 = row.iter().enumerate().map(|(f, &id)| weights[f][id as usize]).sum();
        if n_fields >= 2 && row[0] % 2 == row[1] % 2 {
            z += 1.5;
        }
        let p = 1.0 / (1.0 + (-(z - 0.75)).exp());
        labels.push(u8::from(r.random::<f64>() < p));
        ids.extend(row);
    }
    EncodedData::new(n_fields, ids, labels).unwrap()
}

/// Writes `data` as CSV text with header `click,f0,f1,...` and tokens `t<id>`.
pub fn write_csv(path: &Path, data: &EncodedData) {
    let mut text = String::from("click");
    for f in 0..data.n_fields() {
        write!(text, ",f{f}").unwrap();
    }
    text.push('\n');
    for i in 0..data.len() {
        write!(text, "{}", data.labels()[i]).unwrap();
        for id in data.row(i) {
            write!(text, ",t{id}").unwrap();
        }
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

/// TOML run configuration for a CSV written by [`write_csv`].
/// `extra` is appended to the training block; epochs default to 2.
pub fn run_config(csv: &Path, n_fields: usize, out: &Path, extra: &str) -> String {
    let extra = if extra.contains("epochs") { extra.to_string() } else { format!("epochs = 2\n{extra}") };
    let fields: Vec<String> = (0..n_fields).map(|f| format!("{{ name = \"f{f}\", kind = \"categorical\" }}")).collect();
    format!(
        "[dataset]\npaths = [{csv:?}]\nlabel = \"click\"\nfields = [{}]\n\n[model]\nd = 8\nrank = 4\nlayers = 2\n\n[training]\nlr = 0.01\nbatch_size = 64\nmicro_batch = 64\n{extra}\n[output]\ndir = {out:?}\n",
        fields.join(", ")
    )
}

fn mat_tensor(m: &Mat) -> Tensor<f64> {
    Tensor::new(&[m.len(), m[0].len()], flatten(m)).unwrap()
}

fn vec_tensor(v: &[f64]) -> Tensor<f64> {
    Tensor::new(&[v.len()], v.to_vec()).unwrap()
}

fn block_leaf(tape: &mut Tape<'_, f64>, m: &Mat) -> Var {
    tape.leaf(Tensor::new(&[1, m.len(), m[0].len()], flatten(m)).unwrap(), false)
}

fn max_gap(got: &Tensor<f64>, want: &Mat) -> f64 {
    let want = flatten(want);
    assert_eq!(got.numel(), want.len());
    got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn dims(r: &mut impl Rng) -> (usize, usize) {
    (r.random_range(1..=4), r.random_range(1..=8))
}

/// Largest elementwise gap between `bilinear_interact` and its reference on a
/// random instance.
pub fn bilinear_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d) = dims(&mut r);
    let rank = r.random_range(1..=d);
    let (a, b) = (random_mat(&mut r, n, d, 1.0), random_mat(&mut r, n, d, 1.0));
    let (inner, outer, bias) = (random_mat(&mut r, rank, d, 1.0), random_mat(&mut r, d, d, 1.0), random_vec(&mut r, d, 1.0));
    let want = bilinear(&a, &b, &inner, &outer, &bias);
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let (av, bv) = (block_leaf(&mut tape, &a), block_leaf(&mut tape, &b));
    let iv = tape.leaf(mat_tensor(&inner), false);
    let ov = tape.leaf(mat_tensor(&outer), false);
    let bb = tape.leaf(vec_tensor(&bias), false);
    let out = rli::bilinear_interact(&mut tape, av, bv, iv, ov, bb).unwrap();
    max_gap(tape.value(out), &want)
}

pub fn self_attention_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d) = dims(&mut r);
    let (q, k, v) = (random_mat(&mut r, n, d, 2.0), random_mat(&mut r, n, d, 2.0), random_mat(&mut r, n, d, 2.0));
    let want = attend(&q, &k, &v);
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let (qv, kv, vv) = (block_leaf(&mut tape, &q), block_leaf(&mut tape, &k), block_leaf(&mut tape, &v));
    let out = naf::self_attention(&mut tape, qv, kv, vv).unwrap();
    max_gap(tape.value(out), &want)
}

pub fn cross_attention_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d) = dims(&mut r);
    let m: Vec<Mat> = (0..5).map(|_| random_mat(&mut r, n, d, 2.0)).collect();
    let (w, b) = (random_mat(&mut r, d, 2 * d, 1.0), random_vec(&mut r, d, 1.0));
    let want = cross(&m[0], (&m[1], &m[2]), (&m[3], &m[4]), &w, &b);
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let v: Vec<Var> = m.iter().map(|x| block_leaf(&mut tape, x)).collect();
    let wv = tape.leaf(mat_tensor(&w), false);
    let bv = tape.leaf(vec_tensor(&b), false);
    let out = naf::cross_attention(&mut tape, v[0], (v[1], v[2]), (v[3], v[4]), wv, bv).unwrap();
    max_gap(tape.value(out), &want)
}

fn store_dense(s: &mut ParamStore<f64>, name: &str, p: &DenseW) -> DenseParams {
    DenseParams {
        weight: s.insert(format!("{name}.w"), mat_tensor(&p.w)).unwrap(),
        bias: s.insert(format!("{name}.b"), vec_tensor(&p.b)).unwrap(),
    }
}

pub fn naf_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d) = dims(&mut r);
    let rounds = r.random_range(1..=2);
    let with_self = r.random::<bool>();
    let blocks: Vec<Mat> = (0..3).map(|_| random_mat(&mut r, n, d, 1.0)).collect();
    let p = random_naf(&mut r, d, rounds, with_self);
    let want = naf(std::array::from_fn(|m| &blocks[m]), &p);
    let mut store = ParamStore::new();
    let params = NafParams {
        rounds: p
            .rounds
            .iter()
            .enumerate()
            .map(|(k, rw)| AttentionRound {
                qkv: std::array::from_fn(|m| store_dense(&mut store, &format!("r{k}.qkv{m}"), &rw.qkv[m])),
                cross: std::array::from_fn(|m| store_dense(&mut store, &format!("r{k}.cross{m}"), &rw.cross[m])),
            })
            .collect(),
        fuse: store_dense(&mut store, "fuse", &p.fuse),
        project: store_dense(&mut store, "project", &p.project),
        self_attention: with_self,
    };
    let mut tape = Tape::new(&store);
    let v: Vec<Var> = blocks.iter().map(|x| block_leaf(&mut tape, x)).collect();
    let out = naf::naf_fuse(&mut tape, [v[0], v[1], v[2]], &params).unwrap();
    max_gap(tape.value(out), &want)
}

/// Full-model gradient check on `N` fields, `d`, `R`, `L`, `batch` in f64.
/// Returns the report from central differences.
pub fn model_gradcheck(
    seed: u64,
    n_fields: usize,
    d: usize,
    rank: usize,
    layers: usize,
    batch: usize,
    per_param: usize,
) -> dlf_core::gradcheck::GradCheckReport {
    use dlf_core::data::ExampleBatch;
    use dlf_core::model::{DlfModel, ForwardMode, ModelConfig};

    let cfg = ModelConfig { d, rank, layers, seed, ..ModelConfig::default() };
    let schema = schema(n_fields, 5);
    let mut model = DlfModel::<f64>::init(&cfg, &schema).unwrap();
    let mut r = rng(seed);
    // Unit-scale embeddings and nonzero biases keep ReLU and gate inputs far
    // from their kinks relative to the finite-difference step.
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        let t = model.params_mut().get_mut(id);
        if name == "embedding" {
            let s = (d as f64).sqrt();
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        } else if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        }
    }
    let batch = ExampleBatch {
        n_fields,
        ids: (0..batch * n_fields).map(|_| r.random_range(0..5)).collect(),
        labels: (0..batch).map(|i| (i % 2) as u8).collect(),
    };
    let (_, grads) = model.loss_and_grads(&batch, ForwardMode::eval()).unwrap();
    let mut store = model.params().clone();
    dlf_core::gradcheck::check(&mut store, &grads, per_param, &mut r, |s| {
        DlfModel::from_params(&cfg, &schema, s.clone()).unwrap().loss(&batch, ForwardMode::eval()).unwrap()
    })
}
