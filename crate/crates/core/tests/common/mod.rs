//! Straight-line reference implementations used as test oracles. Nothing
//! here calls into the library's numeric code.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scl_core::autodiff::{ParamStore, Tensor};
use scl_core::losses::Aggregation;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn flat(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::new(vec![m.len(), m[0].len()], flat(m)).unwrap()
}

pub fn to_tensor3(m: &[Mat]) -> Tensor {
    Tensor::new(
        vec![m.len(), m[0].len(), m[0][0].len()],
        m.iter().flat_map(|x| flat(x)).collect(),
    )
    .unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn unit(a: &[f64]) -> Vec<f64> {
    let n = dot(a, a).sqrt();
    let n = if n < 1e-12 { 1e-12 } else { n };
    a.iter().map(|x| x / n).collect()
}

pub fn ce(logits: &Mat, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let mut z = 0.0;
        for &v in row {
            z += v.exp();
        }
        total += -(row[y].exp() / z).ln();
    }
    total / labels.len() as f64
}

/// The anchor/positive/negative sum over an arbitrary similarity function.
/// `count` is the same-label count in the doubled batch, i.e. `2·N_y`.
pub fn contrastive(
    m: usize,
    sim: impl Fn(usize, usize) -> f64,
    labels: &[usize],
    tau: f64,
    mean: bool,
) -> f64 {
    let mut loss = 0.0;
    for i in 0..m {
        let count = labels.iter().filter(|&&y| y == labels[i]).count();
        if count < 2 {
            continue;
        }
        let coeff = 1.0 / (count as f64 - 1.0);
        let mut denom = 0.0;
        for k in 0..m {
            if k != i {
                denom += (sim(i, k) / tau).exp();
            }
        }
        let mut inner = 0.0;
        for j in 0..m {
            if j != i && labels[j] == labels[i] {
                inner += ((sim(i, j) / tau).exp() / denom).ln();
            }
        }
        loss += -coeff * inner;
    }
    if mean {
        loss / m as f64
    } else {
        loss
    }
}

pub fn gc(f: &Mat, labels: &[usize], tau: f64, mean: bool) -> f64 {
    let u: Mat = f.iter().map(|r| unit(r)).collect();
    contrastive(f.len(), |i, j| dot(&u[i], &u[j]), labels, tau, mean)
}

/// One-hidden-layer ReLU perceptron with `[in][out]` weights.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

fn to_mat(t: &Tensor) -> Mat {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

impl Mlp {
    pub fn from_store(store: &ParamStore, name: &str) -> Self {
        let get = |s: &str| store.find(&format!("{name}.{s}")).unwrap().value.clone();
        Self {
            w1: to_mat(&get("hidden.weight")),
            b1: get("hidden.bias").data().to_vec(),
            w2: to_mat(&get("out.weight")),
            b2: get("out.bias").data().to_vec(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let layer = |x: &[f64], w: &Mat, b: &[f64]| -> Vec<f64> {
            let mut y = b.to_vec();
            for (i, xi) in x.iter().enumerate() {
                for (o, yo) in y.iter_mut().enumerate() {
                    *yo += xi * w[i][o];
                }
            }
            y
        };
        let h: Vec<f64> = layer(x, &self.w1, &self.b1)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        layer(&h, &self.w2, &self.b2)
    }
}

/// Aligns `v_i` to `j`: row `r` is `Σ_s a[r][s] v_i^s` with
/// `a[r] = softmax_s(q_j^r · k_i^s / √d′)`.
pub fn aligned(v_i: &Mat, k_i: &Mat, q_j: &Mat) -> (Mat, Mat) {
    let hw = v_i.len();
    let dh = v_i[0].len() as f64;
    let mut a = vec![vec![0.0; hw]; hw];
    let mut out = vec![vec![0.0; v_i[0].len()]; hw];
    for r in 0..hw {
        let logits: Vec<f64> = (0..hw).map(|s| dot(&q_j[r], &k_i[s]) / dh.sqrt()).collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for s in 0..hw {
            a[r][s] = (logits[s] - m).exp() / z;
            for c in 0..out[r].len() {
                out[r][c] += a[r][s] * v_i[s][c];
            }
        }
    }
    (out, a)
}

pub fn aggregate(xs: &[f64], agg: Aggregation) -> f64 {
    match agg {
        Aggregation::Sum => xs.iter().sum(),
        Aggregation::Mean => xs.iter().sum::<f64>() / xs.len() as f64,
        Aggregation::Max => xs.iter().cloned().fold(f64::MIN, f64::max),
        Aggregation::LogSumExp => xs.iter().map(|x| x.exp()).sum::<f64>().ln(),
    }
}

pub struct Vqk {
    pub v: Mat,
    pub q: Mat,
    pub k: Mat,
}

pub fn sim_s(i: &Vqk, j: &Vqk, agg: Aggregation, renorm: bool) -> f64 {
    let (mut v_ij, _) = aligned(&i.v, &i.k, &j.q);
    let (mut v_ji, _) = aligned(&j.v, &j.k, &i.q);
    if renorm {
        v_ij = v_ij.iter().map(|r| unit(r)).collect();
        v_ji = v_ji.iter().map(|r| unit(r)).collect();
    }
    let per: Vec<f64> = (0..i.v.len())
        .map(|r| dot(&i.v[r], &v_ji[r]) + dot(&j.v[r], &v_ij[r]))
        .collect();
    aggregate(&per, agg)
}

/// Value/query/key vectors of one spatial map under the heads in `store`.
pub fn vqk(z: &Mat, store: &ParamStore) -> Vqk {
    let hv = Mlp::from_store(store, "value");
    let hq = Mlp::from_store(store, "query");
    let hk = Mlp::from_store(store, "key");
    Vqk {
        v: z.iter().map(|x| unit(&hv.apply(x))).collect(),
        q: z.iter().map(|x| hq.apply(x)).collect(),
        k: z.iter().map(|x| hk.apply(x)).collect(),
    }
}

pub struct ScOpts {
    pub tau_prime: f64,
    pub agg: Aggregation,
    pub mean: bool,
    pub renorm: bool,
}

pub fn sc(z: &[Mat], store: &ParamStore, labels: &[usize], o: &ScOpts) -> f64 {
    let packs: Vec<Vqk> = z.iter().map(|m| vqk(m, store)).collect();
    contrastive(
        z.len(),
        |i, j| sim_s(&packs[i], &packs[j], o.agg, o.renorm),
        labels,
        o.tau_prime,
        o.mean,
    )
}

pub fn kl(student: &Mat, teacher: &Mat, t: f64) -> f64 {
    let soft = |row: &[f64]| -> Vec<f64> {
        let z: f64 = row.iter().map(|v| (v / t).exp()).sum();
        row.iter().map(|v| (v / t).exp() / z).collect()
    };
    let mut total = 0.0;
    for (s, te) in student.iter().zip(teacher) {
        let (p, q) = (soft(te), soft(s));
        for c in 0..p.len() {
            total += p[c] * (p[c] / q[c]).ln();
        }
    }
    t * t * total / student.len() as f64
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn cd(tg: &Mat, sg: &Mat, ts: &[Mat], ss: &[Mat], alpha: f64, beta: f64) -> f64 {
    let b = tg.len() as f64;
    let mut g = 0.0;
    let mut s = 0.0;
    for i in 0..tg.len() {
        g += sq_dist(&unit(&tg[i]), &unit(&sg[i]));
        for r in 0..ts[i].len() {
            s += sq_dist(&unit(&ts[i][r]), &unit(&ss[i][r]));
        }
    }
    alpha * g / b + beta * s / b
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Repeatedly scans for the best row not yet taken.
pub fn knn_scan(m: &Mat, q: usize, k: usize) -> Vec<usize> {
    let mut taken = vec![false; m.len()];
    taken[q] = true;
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..m.len() {
            if taken[i] {
                continue;
            }
            let s = cosine(&m[i], &m[q]);
            if best.is_none_or(|(bs, _)| s > bs) {
                best = Some((s, i));
            }
        }
        let (_, i) = best.unwrap();
        taken[i] = true;
        out.push(i);
    }
    out
}

pub fn davies_bouldin_direct(x: &Mat, labels: &[usize]) -> f64 {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort();
    classes.dedup();
    let d = x[0].len();
    let centroid = |c: usize| -> Vec<f64> {
        let members: Vec<&Vec<f64>> = x
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == c)
            .map(|(r, _)| r)
            .collect();
        (0..d)
            .map(|j| members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64)
            .collect()
    };
    let dist = |a: &[f64], b: &[f64]| (0..d).map(|j| (a[j] - b[j]).powi(2)).sum::<f64>().sqrt();
    let scatter = |c: usize| -> f64 {
        let mu = centroid(c);
        let members: Vec<&Vec<f64>> = x
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == c)
            .map(|(r, _)| r)
            .collect();
        members.iter().map(|r| dist(r, &mu)).sum::<f64>() / members.len() as f64
    };
    let mut total = 0.0;
    for &a in &classes {
        let mut worst = 0.0f64;
        for &b in &classes {
            if a != b {
                worst = worst.max((scatter(a) + scatter(b)) / dist(&centroid(a), &centroid(b)));
            }
        }
        total += worst;
    }
    total / classes.len() as f64
}

pub fn power_iteration_top(a: &Mat) -> f64 {
    let d = a[0].len();
    let mut v = vec![1.0; d];
    let mut lambda = 0.0;
    for _ in 0..2000 {
        let av: Vec<f64> = a
            .iter()
            .map(|r| (0..d).map(|j| r[j] * v[j]).sum())
            .collect();
        let w: Vec<f64> = (0..d)
            .map(|j| a.iter().zip(&av).map(|(r, x)| r[j] * x).sum())
            .collect();
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        lambda = n;
        v = w.iter().map(|x| x / n).collect();
    }
    lambda.sqrt()
}
