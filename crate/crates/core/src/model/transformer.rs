use std::collections::BTreeMap;

use super::{block_base, head_base, slot, Batch, ModelConfig, ParamStore};
use crate::error::{JpsError, Result};
use crate::rng::SeededRng;
use crate::tensor::{matmul_into, Tensor};

const LN_EPS: f64 = 1e-5;

/// Per-parameter gradients, aligned with the `ParamStore` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    ids: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Gradients {
    fn zeros_like(params: &ParamStore) -> Self {
        Self {
            ids: params
                .entries()
                .iter()
                .map(|e| e.param_id.clone())
                .collect(),
            tensors: params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.tensor.shape()))
                .collect(),
        }
    }

    pub fn get(&self, param_id: &str) -> Result<&Tensor> {
        self.ids
            .iter()
            .position(|id| id == param_id)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| JpsError::Lookup(param_id.to_string()))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.ids
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    fn buf(&mut self, index: usize) -> &mut [f64] {
        self.tensors[index].data_mut()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn mm(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    matmul_into(a, b, &mut out, p, q, r);
    out
}

/// `out[q x r] += a[p x q]^T * b[p x r]`
fn mm_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let brow = &b[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[k * r..(k + 1) * r];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `a[p x r] * b[q x r]^T`, giving `p x q`.
fn mm_a_bt(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        let arow = &a[i * r..(i + 1) * r];
        for j in 0..q {
            let brow = &b[j * r..(j + 1) * r];
            out[i * q + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn col_sum_acc(a: &[f64], out: &mut [f64], cols: usize) {
    for row in a.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layernorm(x: &[f64], gamma: &[f64], beta: &[f64], d: usize) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for t in 0..rows {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[t * d + j] = xh;
            y[t * d + j] = gamma[j] * xh + beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Returns `dx`; accumulates into `dgamma`, `dbeta`.
fn layernorm_backward(
    dy: &[f64],
    cache: &LayerNormCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    d: usize,
) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for t in 0..rows {
        let dyr = &dy[t * d..(t + 1) * d];
        let xh = &cache.xhat[t * d..(t + 1) * d];
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[t * d + j] = cache.rstd[t] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

struct BlockCache {
    ln1: LayerNormCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LayerNormCache,
    c: Vec<f64>,
    hpre: Vec<f64>,
    drop: Option<Vec<f64>>,
    gd: Vec<f64>,
}

struct SampleCache {
    tokens_in: Vec<f64>,
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

fn sample_forward(
    params: &ParamStore,
    cfg: &ModelConfig,
    tokens_in: &[f64],
    mut dropout: Option<&mut SeededRng>,
) -> SampleCache {
    let t = cfg.num_tokens;
    let d = cfg.d_model;
    let h = cfg.mlp_hidden;
    let mut x = mm(tokens_in, params.tensor(0), t, d, d);
    for (xv, pv) in x.iter_mut().zip(params.tensor(1)) {
        *xv += pv;
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for b in 0..cfg.num_blocks {
        let base = block_base(b);
        let w = |s: usize| params.tensor(base + s);
        let (a, ln1) = layernorm(&x, w(slot::LN1_GAMMA), w(slot::LN1_BETA), d);
        let q = mm(&a, w(slot::WQ), t, d, d);
        let k = mm(&a, w(slot::WK), t, d, d);
        let v = mm(&a, w(slot::WV), t, d, d);
        let mut probs = mm_a_bt(&q, &k, t, t, d);
        for row in probs.chunks_exact_mut(t) {
            row.iter_mut().for_each(|s| *s *= scale);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            row.iter_mut().for_each(|s| *s /= z);
        }
        let o = mm(&probs, &v, t, t, d);
        let attn_out = mm(&o, w(slot::WO), t, d, d);
        for (xv, av) in x.iter_mut().zip(&attn_out) {
            *xv += av;
        }
        let (c, ln2) = layernorm(&x, w(slot::LN2_GAMMA), w(slot::LN2_BETA), d);
        let mut hpre = mm(&c, w(slot::FC1_W), t, d, h);
        for row in hpre.chunks_exact_mut(h) {
            for (hv, bv) in row.iter_mut().zip(w(slot::FC1_B)) {
                *hv += bv;
            }
        }
        let mut gd: Vec<f64> = hpre.iter().map(|&z| gelu(z)).collect();
        let drop = match dropout.as_deref_mut() {
            Some(rng) if cfg.dropout_rate > 0.0 => {
                let keep = 1.0 - cfg.dropout_rate;
                let m: Vec<f64> = (0..gd.len())
                    .map(|_| {
                        if rng.uniform() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                gd.iter_mut().zip(&m).for_each(|(g, s)| *g *= s);
                Some(m)
            }
            _ => None,
        };
        let mlp_out = mm(&gd, w(slot::FC2_W), t, h, d);
        for row in 0..t {
            for j in 0..d {
                x[row * d + j] += mlp_out[row * d + j] + w(slot::FC2_B)[j];
            }
        }
        blocks.push(BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            c,
            hpre,
            drop,
            gd,
        });
    }
    let mut pooled = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (p, v) in pooled.iter_mut().zip(row) {
            *p += v;
        }
    }
    pooled.iter_mut().for_each(|p| *p /= t as f64);
    let hb = head_base(cfg);
    let mut logits = mm(&pooled, params.tensor(hb), 1, d, cfg.num_classes);
    for (l, b) in logits.iter_mut().zip(params.tensor(hb + 1)) {
        *l += b;
    }
    SampleCache {
        tokens_in: tokens_in.to_vec(),
        blocks,
        pooled,
        logits,
    }
}

fn sample_backward(
    params: &ParamStore,
    cfg: &ModelConfig,
    cache: &SampleCache,
    dlogits: &[f64],
    grads: &mut Gradients,
) {
    let t = cfg.num_tokens;
    let d = cfg.d_model;
    let h = cfg.mlp_hidden;
    let nc = cfg.num_classes;
    let hb = head_base(cfg);

    mm_at_b_acc(&cache.pooled, dlogits, grads.buf(hb), 1, d, nc);
    for (g, v) in grads.buf(hb + 1).iter_mut().zip(dlogits) {
        *g += v;
    }
    let dpooled = mm_a_bt(dlogits, params.tensor(hb), 1, d, nc);
    let mut dx = vec![0.0; t * d];
    for row in dx.chunks_exact_mut(d) {
        for (v, p) in row.iter_mut().zip(&dpooled) {
            *v = p / t as f64;
        }
    }

    let scale = 1.0 / (d as f64).sqrt();
    for b in (0..cfg.num_blocks).rev() {
        let bc = &cache.blocks[b];
        let base = block_base(b);
        let w = |s: usize| params.tensor(base + s);

        // mlp branch
        mm_at_b_acc(&bc.gd, &dx, grads.buf(base + slot::FC2_W), t, h, d);
        col_sum_acc(&dx, grads.buf(base + slot::FC2_B), d);
        let mut dh = mm_a_bt(&dx, w(slot::FC2_W), t, h, d);
        if let Some(m) = &bc.drop {
            dh.iter_mut().zip(m).for_each(|(g, s)| *g *= s);
        }
        dh.iter_mut()
            .zip(&bc.hpre)
            .for_each(|(g, &z)| *g *= gelu_grad(z));
        mm_at_b_acc(&bc.c, &dh, grads.buf(base + slot::FC1_W), t, d, h);
        col_sum_acc(&dh, grads.buf(base + slot::FC1_B), h);
        let dc = mm_a_bt(&dh, w(slot::FC1_W), t, d, h);
        let (dg2, rest) = grads.tensors[base + slot::LN2_GAMMA..].split_at_mut(1);
        let dx_ln2 = layernorm_backward(
            &dc,
            &bc.ln2,
            w(slot::LN2_GAMMA),
            dg2[0].data_mut(),
            rest[0].data_mut(),
            d,
        );
        dx.iter_mut().zip(&dx_ln2).for_each(|(a, b)| *a += b);

        // attention branch
        mm_at_b_acc(&bc.o, &dx, grads.buf(base + slot::WO), t, d, d);
        let dout = mm_a_bt(&dx, w(slot::WO), t, d, d);
        let dprobs = mm_a_bt(&dout, &bc.v, t, t, d);
        let mut dv = vec![0.0; t * d];
        mm_at_b_acc(&bc.probs, &dout, &mut dv, t, t, d);
        let mut ds = vec![0.0; t * t];
        for i in 0..t {
            let p = &bc.probs[i * t..(i + 1) * t];
            let dp = &dprobs[i * t..(i + 1) * t];
            let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
            for j in 0..t {
                ds[i * t + j] = p[j] * (dp[j] - inner) * scale;
            }
        }
        let dq = mm(&ds, &bc.k, t, t, d);
        let mut dk = vec![0.0; t * d];
        mm_at_b_acc(&ds, &bc.q, &mut dk, t, t, d);
        mm_at_b_acc(&bc.a, &dq, grads.buf(base + slot::WQ), t, d, d);
        mm_at_b_acc(&bc.a, &dk, grads.buf(base + slot::WK), t, d, d);
        mm_at_b_acc(&bc.a, &dv, grads.buf(base + slot::WV), t, d, d);
        let mut da = mm_a_bt(&dq, w(slot::WQ), t, d, d);
        for (src, wslot) in [(&dk, slot::WK), (&dv, slot::WV)] {
            let part = mm_a_bt(src, w(wslot), t, d, d);
            da.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
        }
        let (dg1, rest) = grads.tensors[base + slot::LN1_GAMMA..].split_at_mut(1);
        let dx_ln1 = layernorm_backward(
            &da,
            &bc.ln1,
            w(slot::LN1_GAMMA),
            dg1[0].data_mut(),
            rest[0].data_mut(),
            d,
        );
        dx.iter_mut().zip(&dx_ln1).for_each(|(a, b)| *a += b);
    }

    mm_at_b_acc(&cache.tokens_in, &dx, grads.buf(0), t, d, d);
    for (g, v) in grads.buf(1).iter_mut().zip(&dx) {
        *g += v;
    }
}

fn sample_rows(batch: &Batch) -> impl Iterator<Item = &[f64]> {
    let row = batch.inputs.len() / batch.len();
    batch.inputs.data().chunks_exact(row)
}

fn check(params: &ParamStore, cfg: &ModelConfig, batch: &Batch) -> Result<()> {
    params.check_layout(cfg)?;
    batch.check(cfg)
}

/// Logits `[batch x num_classes]`. Dropout is applied only when `train_mode`
/// is set and the configured rate is positive.
pub fn forward(
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &Batch,
    train_mode: bool,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    check(params, cfg, batch)?;
    let mut out = Vec::with_capacity(batch.len() * cfg.num_classes);
    for x in sample_rows(batch) {
        let drop = if train_mode { Some(&mut *rng) } else { None };
        out.extend(sample_forward(params, cfg, x, drop).logits);
    }
    Tensor::new(vec![batch.len(), cfg.num_classes], out)
}

/// Mean-pooled final token representations `[batch x d_model]`, dropout off.
pub fn pooled_features(params: &ParamStore, cfg: &ModelConfig, batch: &Batch) -> Result<Tensor> {
    check(params, cfg, batch)?;
    let mut out = Vec::with_capacity(batch.len() * cfg.d_model);
    for x in sample_rows(batch) {
        out.extend(sample_forward(params, cfg, x, None).pooled);
    }
    Tensor::new(vec![batch.len(), cfg.d_model], out)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

/// Mean softmax cross-entropy.
pub fn loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if n == 0 || logits.shape().len() != 2 || logits.rows() != n {
        return Err(JpsError::Dimension(format!(
            "logits {:?} vs {n} labels",
            logits.shape()
        )));
    }
    let c = logits.cols();
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks_exact(c).zip(labels) {
        total -= log_softmax_row(row)[y];
    }
    Ok(total / n as f64)
}

/// Mean loss and its exact gradient with respect to every parameter.
/// `dropout` enables train-mode dropout when the configured rate is positive.
pub fn loss_and_grads(
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &Batch,
    mut dropout: Option<&mut SeededRng>,
) -> Result<(f64, Gradients)> {
    check(params, cfg, batch)?;
    let n = batch.len() as f64;
    let mut grads = Gradients::zeros_like(params);
    let mut total = 0.0;
    for (x, &y) in sample_rows(batch).zip(&batch.labels) {
        let cache = sample_forward(params, cfg, x, dropout.as_deref_mut());
        let logp = log_softmax_row(&cache.logits);
        total -= logp[y];
        let mut dlogits: Vec<f64> = logp.iter().map(|l| l.exp() / n).collect();
        dlogits[y] -= 1.0 / n;
        sample_backward(params, cfg, &cache, &dlogits, &mut grads);
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(JpsError::Training(format!("non-finite loss {loss}")));
    }
    Ok((loss, grads))
}

/// Exact gradient of the mean loss, dropout off.
pub fn backward(params: &ParamStore, cfg: &ModelConfig, batch: &Batch) -> Result<Gradients> {
    Ok(loss_and_grads(params, cfg, batch, None)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_blocks: 2,
            d_model: 4,
            num_tokens: 2,
            mlp_hidden: 8,
            num_classes: 3,
            dropout_rate: 0.0,
        }
    }

    fn random_batch(cfg: &ModelConfig, n: usize, rng: &mut SeededRng) -> Batch {
        let x = rng.randn(&[n, cfg.num_tokens, cfg.d_model]);
        let labels = (0..n).map(|_| rng.below(cfg.num_classes)).collect();
        Batch::new(x, labels, vec![0; n]).unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let cfg = tiny();
        let p = ParamStore::zeros(&cfg).unwrap();
        let mut rng = SeededRng::new(1);
        let b = random_batch(&cfg, 4, &mut rng);
        let logits = forward(&p, &cfg, &b, false, &mut rng).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_sample_gives_identical_rows() {
        let cfg = tiny();
        let mut rng = SeededRng::new(2);
        let p = ParamStore::init(&cfg, &mut rng).unwrap();
        let b = random_batch(&cfg, 1, &mut rng).select(&[0, 0]).unwrap();
        let logits = forward(&p, &cfg, &b, false, &mut rng).unwrap();
        assert_eq!(logits.data()[..3], logits.data()[3..]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = ModelConfig {
            dropout_rate: 0.5,
            ..tiny()
        };
        let mut rng = SeededRng::new(3);
        let p = ParamStore::init(&cfg, &mut rng).unwrap();
        let b = random_batch(&cfg, 6, &mut rng);
        let a = forward(&p, &cfg, &b, false, &mut rng).unwrap();
        let c = forward(&p, &cfg, &b, false, &mut rng).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let logits = Tensor::zeros(&[3, 5]);
        let l = loss(&logits, &[0, 2, 4]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 2.0, 5.0, 10.0, 30.0] {
            let logits = Tensor::from_rows(&[vec![margin, 0.0, 0.0]]).unwrap();
            let l = loss(&logits, &[0]).unwrap();
            assert!(l >= 0.0 && l < prev);
            prev = l;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn loss_matches_log_sum_exp() {
        let mut rng = SeededRng::new(4);
        let logits = rng.randn(&[7, 4]);
        let labels: Vec<usize> = (0..7).map(|_| rng.below(4)).collect();
        let mut expected = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row: Vec<f64> = (0..4).map(|j| logits.at(i, j)).collect();
            let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
            expected += lse - row[y];
        }
        expected /= 7.0;
        assert!((loss(&logits, &labels).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn head_bias_gradient_is_mean_residual() {
        let cfg = tiny();
        let mut rng = SeededRng::new(5);
        let p = ParamStore::init(&cfg, &mut rng).unwrap();
        let b = random_batch(&cfg, 5, &mut rng);
        let logits = forward(&p, &cfg, &b, false, &mut rng).unwrap();
        let g = backward(&p, &cfg, &b).unwrap();
        let mut expected = [0.0; 3];
        for (i, &y) in b.labels.iter().enumerate() {
            let row: Vec<f64> = (0..3).map(|j| logits.at(i, j)).collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..3 {
                let onehot = if j == y { 1.0 } else { 0.0 };
                expected[j] += (row[j].exp() / z - onehot) / 5.0;
            }
        }
        for (a, e) in g.get("head.bias").unwrap().data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-14, "{a} vs {e}");
        }
    }

    #[test]
    fn zero_input_zero_embedding_kills_first_fc1_weight_grad() {
        let cfg = tiny();
        let mut rng = SeededRng::new(6);
        let mut p = ParamStore::init(&cfg, &mut rng).unwrap();
        p.get_mut("embed.weight").unwrap().data_mut().fill(0.0);
        p.get_mut("embed.pos").unwrap().data_mut().fill(0.0);
        let x = Tensor::zeros(&[3, cfg.num_tokens, cfg.d_model]);
        let b = Batch::new(x, vec![0, 1, 2], vec![0; 3]).unwrap();
        let g = backward(&p, &cfg, &b).unwrap();
        // block 0 sees an all-zero residual stream, so its fc1 input is ln2.beta = 0
        assert!(g
            .get("blocks.0.fc1.weight")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        // the bias path still carries gradient
        assert!(g
            .get("blocks.0.fc1.bias")
            .unwrap()
            .data()
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn dropout_changes_train_forward_only() {
        let cfg = ModelConfig {
            dropout_rate: 0.5,
            ..tiny()
        };
        let mut rng = SeededRng::new(8);
        let p = ParamStore::init(&cfg, &mut rng).unwrap();
        let b = random_batch(&cfg, 4, &mut rng);
        let eval = forward(&p, &cfg, &b, false, &mut rng).unwrap();
        let train = forward(&p, &cfg, &b, true, &mut SeededRng::new(9)).unwrap();
        let train2 = forward(&p, &cfg, &b, true, &mut SeededRng::new(9)).unwrap();
        assert_ne!(eval, train);
        assert_eq!(train, train2);
    }
}
