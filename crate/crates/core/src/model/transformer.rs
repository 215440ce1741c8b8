//! Pre-norm decoder-only transformer with token, position and token-type
//! embeddings and an output projection tied to the token embedding.
//! Forward and backward passes are written out by hand.

use std::ops::AddAssign;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, NdFloat, Zip};
use rand::Rng;

use super::params::{mat, mat_mut, vec1, vec1_mut, Layout, TensorSpec};
use super::{cast, LanguageModel, ModelConfig, ModelError};
use crate::linearize::{TokenId, TokenType};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<F> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<F>,
}

struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

struct LayerCache<F> {
    ln1: LnCache<F>,
    a: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    o: Array2<F>,
    drop_attn: Option<Array2<F>>,
    ln2: LnCache<F>,
    m: Array2<F>,
    f: Array2<F>,
    g: Array2<F>,
    drop_mlp: Option<Array2<F>>,
}

fn layer_norm<F: NdFloat>(x: ArrayView2<F>, g: ArrayView1<F>, b: ArrayView1<F>) -> (Array2<F>, LnCache<F>) {
    let d: F = cast(x.ncols() as f64);
    let eps: F = cast(LN_EPS);
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = &x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let rstd = var.mapv(|v| F::one() / (v + eps).sqrt());
    let xhat = centered * &rstd.view().insert_axis(Axis(1));
    let out = &xhat * &g + &b;
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward<F: NdFloat>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    g: ArrayView1<F>,
    layout: &Layout,
    grads: &mut [F],
    (g_id, b_id): (usize, usize),
) -> Array2<F> {
    let d: F = cast(dy.ncols() as f64);
    vec1_mut(layout, grads, g_id).add_assign(&(dy * &cache.xhat).sum_axis(Axis(0)));
    vec1_mut(layout, grads, b_id).add_assign(&dy.sum_axis(Axis(0)));
    let dxhat = dy * &g;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let mut dx = dxhat - &mean_dxhat.insert_axis(Axis(1));
    dx -= &(&cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)));
    dx * &cache.rstd.view().insert_axis(Axis(1))
}

const GELU_A: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu<F: NdFloat>(x: F) -> F {
    let half: F = cast(0.5);
    let inner = cast::<F>(SQRT_2_OVER_PI) * (x + cast::<F>(GELU_A) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: NdFloat>(x: F) -> F {
    let half: F = cast(0.5);
    let c: F = cast(SQRT_2_OVER_PI);
    let a: F = cast(GELU_A);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + cast::<F>(3.0) * a * x * x)
}

/// In-place row softmax; entries equal to -inf become 0.
fn softmax_rows<F: NdFloat>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// `out += a · b`
fn matmul_into<F: NdFloat>(a: &ArrayView2<F>, b: &ArrayView2<F>, out: &mut ndarray::ArrayViewMut2<F>) {
    general_mat_mul(F::one(), a, b, F::one(), out);
}

fn dropout_mask<F: NdFloat, R: Rng>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Array2<F> {
    let keep: F = cast(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < p { F::zero() } else { keep })
}

/// Key/value cache for incremental decoding. The cache is keyed by the
/// token prefix it was computed from; a call with a different prefix reuses
/// the longest common prefix.
#[derive(Clone, Debug)]
pub struct KvState<F> {
    ids: Vec<TokenId>,
    types: Vec<TokenType>,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    last_logits: Option<Array1<F>>,
}

impl<F> Default for KvState<F> {
    fn default() -> Self {
        KvState { ids: Vec::new(), types: Vec::new(), keys: Vec::new(), values: Vec::new(), last_logits: None }
    }
}

impl<F> KvState<F> {
    pub fn cached_len(&self) -> usize {
        self.ids.len()
    }

    fn truncate(&mut self, len: usize, d: usize) {
        self.ids.truncate(len);
        self.types.truncate(len);
        for k in self.keys.iter_mut().chain(self.values.iter_mut()) {
            k.truncate(len * d);
        }
        self.last_logits = None;
    }
}

impl<F: NdFloat> Transformer<F> {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = layout.init(&config);
        Ok(Transformer { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<F>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Transformer { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn tensor_specs(&self) -> &[TensorSpec] {
        &self.layout.specs
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Converts every parameter to another float type.
    pub fn cast<G: NdFloat>(&self) -> Transformer<G> {
        Transformer {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|&p| cast(p.to_f64().expect("finite"))).collect(),
        }
    }

    /// Sets the token-type embedding table to zero.
    pub fn zero_token_types(&mut self) {
        let r = self.layout.range(self.layout.wtt);
        self.params[r].fill(F::zero());
    }

    fn check_inputs(&self, ids: &[TokenId], types: &[TokenType], start: usize) -> Result<(), ModelError> {
        if ids.len() != types.len() {
            return Err(ModelError::LengthMismatch { ids: ids.len(), types: types.len() });
        }
        if start + ids.len() > self.config.max_positions {
            return Err(ModelError::PrefixTooLong { len: start + ids.len(), max: self.config.max_positions });
        }
        if let Some(&id) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        if let Some(&t) = types.iter().find(|t| t.index() >= self.config.token_type_count) {
            return Err(ModelError::InvalidConfig(format!("token type {t:?} exceeds token_type_count")));
        }
        Ok(())
    }

    fn embed(&self, ids: &[TokenId], types: &[TokenType], start: usize) -> Array2<F> {
        let (lay, p) = (&self.layout, &self.params[..]);
        let (wte, wpe, wtt) = (mat(lay, p, lay.wte), mat(lay, p, lay.wpe), mat(lay, p, lay.wtt));
        let mut x = Array2::zeros((ids.len(), self.config.hidden_dim));
        for (t, mut row) in x.rows_mut().into_iter().enumerate() {
            row.assign(&wte.row(ids[t] as usize));
            row += &wpe.row(start + t);
            row += &wtt.row(types[t].index());
        }
        x
    }

    fn attention_scale(&self) -> F {
        cast(1.0 / ((self.config.hidden_dim / self.config.heads) as f64).sqrt())
    }

    /// Full forward pass, keeping what the backward pass needs.
    fn forward_cached<R: Rng>(
        &self,
        ids: &[TokenId],
        types: &[TokenType],
        mut rng: Option<&mut R>,
    ) -> (Vec<LayerCache<F>>, Option<Array2<F>>, LnCache<F>, Array2<F>) {
        let (lay, p) = (&self.layout, &self.params[..]);
        let c = &self.config;
        let (t_len, d, heads) = (ids.len(), c.hidden_dim, c.heads);
        let dh = d / heads;
        let scale = self.attention_scale();
        let dropping = c.dropout > 0.0 && rng.is_some();
        let mut x = self.embed(ids, types, 0);
        let drop_emb = if dropping {
            let m = dropout_mask(t_len, d, c.dropout, rng.as_deref_mut().expect("rng"));
            x *= &m;
            Some(m)
        } else {
            None
        };
        let mut caches = Vec::with_capacity(c.layers);
        for ids_l in &lay.layers {
            let (a, ln1) = layer_norm(x.view(), vec1(lay, p, ids_l.ln1_g), vec1(lay, p, ids_l.ln1_b));
            let qkv = a.dot(&mat(lay, p, ids_l.qkv_w)) + &vec1(lay, p, ids_l.qkv_b);
            let mut o = Array2::zeros((t_len, d));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut sc = q.dot(&k.t()) * scale;
                for i in 0..t_len {
                    sc.slice_mut(s![i, i + 1..]).fill(F::neg_infinity());
                }
                softmax_rows(&mut sc);
                o.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&sc.dot(&v));
                probs.push(sc);
            }
            let mut y = o.dot(&mat(lay, p, ids_l.out_w)) + &vec1(lay, p, ids_l.out_b);
            let drop_attn = if dropping {
                let m = dropout_mask(t_len, d, c.dropout, rng.as_deref_mut().expect("rng"));
                y *= &m;
                Some(m)
            } else {
                None
            };
            x += &y;
            let (m, ln2) = layer_norm(x.view(), vec1(lay, p, ids_l.ln2_g), vec1(lay, p, ids_l.ln2_b));
            let f = m.dot(&mat(lay, p, ids_l.fc_w)) + &vec1(lay, p, ids_l.fc_b);
            let g = f.mapv(gelu);
            let mut z = g.dot(&mat(lay, p, ids_l.proj_w)) + &vec1(lay, p, ids_l.proj_b);
            let drop_mlp = if dropping {
                let mk = dropout_mask(t_len, d, c.dropout, rng.as_deref_mut().expect("rng"));
                z *= &mk;
                Some(mk)
            } else {
                None
            };
            x += &z;
            caches.push(LayerCache { ln1, a, qkv, probs, o, drop_attn, ln2, m, f, g, drop_mlp });
        }
        let (xf, lnf) = layer_norm(x.view(), vec1(lay, p, lay.lnf_g), vec1(lay, p, lay.lnf_b));
        (caches, drop_emb, lnf, xf)
    }

    /// Logits at every position, shape `(len, vocab)`.
    pub fn logits(&self, ids: &[TokenId], types: &[TokenType]) -> Result<Array2<F>, ModelError> {
        self.check_inputs(ids, types, 0)?;
        let (_, _, _, xf) = self.forward_cached::<rand_chacha::ChaCha8Rng>(ids, types, None);
        Ok(xf.dot(&mat(&self.layout, &self.params, self.layout.wte).t()))
    }

    /// Sum of cross-entropy over positions with `weights[t]`, predicting
    /// `targets[t]` from `inputs[..=t]`, and the number of such positions.
    pub fn loss(
        &self,
        inputs: &[TokenId],
        types: &[TokenType],
        targets: &[TokenId],
        weights: &[bool],
    ) -> Result<(f64, usize), ModelError> {
        self.run(inputs, types, targets, weights, None, None::<&mut rand_chacha::ChaCha8Rng>)
    }

    /// Like [`Transformer::loss`], and adds `scale` times the gradient of the
    /// summed loss to `grads`. Dropout is active when `rng` is given.
    pub fn loss_and_grad<R: Rng>(
        &self,
        inputs: &[TokenId],
        types: &[TokenType],
        targets: &[TokenId],
        weights: &[bool],
        scale: F,
        grads: &mut [F],
        rng: Option<&mut R>,
    ) -> Result<(f64, usize), ModelError> {
        assert_eq!(grads.len(), self.layout.total, "gradient buffer size");
        self.run(inputs, types, targets, weights, Some((scale, grads)), rng)
    }

    fn run<R: Rng>(
        &self,
        inputs: &[TokenId],
        types: &[TokenType],
        targets: &[TokenId],
        weights: &[bool],
        backward: Option<(F, &mut [F])>,
        rng: Option<&mut R>,
    ) -> Result<(f64, usize), ModelError> {
        self.check_inputs(inputs, types, 0)?;
        if targets.len() != inputs.len() || weights.len() != inputs.len() {
            return Err(ModelError::LengthMismatch { ids: inputs.len(), types: targets.len().min(weights.len()) });
        }
        let rows: Vec<usize> = (0..inputs.len()).filter(|&t| weights[t]).collect();
        if let Some(&t) = rows.iter().find(|&&t| targets[t] as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id: targets[t], vocab: self.config.vocab_size });
        }
        if rows.is_empty() {
            return Ok((0.0, 0));
        }
        let (lay, p) = (&self.layout, &self.params[..]);
        let (caches, drop_emb, lnf, xf) = self.forward_cached(inputs, types, rng);
        let wte = mat(lay, p, lay.wte);
        let sel = xf.select(Axis(0), &rows);
        let mut logits = sel.dot(&wte.t());
        let mut total = 0.0f64;
        for (r, mut row) in logits.rows_mut().into_iter().enumerate() {
            let target = targets[rows[r]] as usize;
            let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
            let sum = row.fold(F::zero(), |acc, &v| acc + (v - max).exp());
            let lse = max + sum.ln();
            total += (lse - row[target]).to_f64().expect("finite");
            if backward.is_some() {
                row.mapv_inplace(|v| (v - lse).exp());
                row[target] -= F::one();
            }
        }
        let Some((scale, grads)) = backward else {
            return Ok((total, rows.len()));
        };
        // logits now hold d(loss)/d(logits) before scaling
        logits *= scale;
        let dlogits = logits;
        matmul_into(&dlogits.t(), &sel.view(), &mut mat_mut(lay, grads, lay.wte));
        let mut dxf = Array2::zeros(xf.raw_dim());
        let dsel = dlogits.dot(&wte);
        for (r, &t) in rows.iter().enumerate() {
            dxf.row_mut(t).assign(&dsel.row(r));
        }
        let mut dx = layer_norm_backward(&dxf, &lnf, vec1(lay, p, lay.lnf_g), lay, grads, (lay.lnf_g, lay.lnf_b));

        let c = &self.config;
        let (d, heads) = (c.hidden_dim, c.heads);
        let dh = d / heads;
        let att_scale = self.attention_scale();
        for (ids_l, cache) in lay.layers.iter().zip(&caches).rev() {
            // MLP branch
            let mut dz = dx.clone();
            if let Some(m) = &cache.drop_mlp {
                dz *= m;
            }
            matmul_into(&cache.g.t(), &dz.view(), &mut mat_mut(lay, grads, ids_l.proj_w));
            vec1_mut(lay, grads, ids_l.proj_b).add_assign(&dz.sum_axis(Axis(0)));
            let mut df = dz.dot(&mat(lay, p, ids_l.proj_w).t());
            Zip::from(&mut df).and(&cache.f).for_each(|d, &f| *d *= gelu_grad(f));
            matmul_into(&cache.m.t(), &df.view(), &mut mat_mut(lay, grads, ids_l.fc_w));
            vec1_mut(lay, grads, ids_l.fc_b).add_assign(&df.sum_axis(Axis(0)));
            let dm = df.dot(&mat(lay, p, ids_l.fc_w).t());
            dx += &layer_norm_backward(&dm, &cache.ln2, vec1(lay, p, ids_l.ln2_g), lay, grads, (ids_l.ln2_g, ids_l.ln2_b));

            // attention branch
            let mut dy = dx.clone();
            if let Some(m) = &cache.drop_attn {
                dy *= m;
            }
            matmul_into(&cache.o.t(), &dy.view(), &mut mat_mut(lay, grads, ids_l.out_w));
            vec1_mut(lay, grads, ids_l.out_b).add_assign(&dy.sum_axis(Axis(0)));
            let d_o = dy.dot(&mat(lay, p, ids_l.out_w).t());
            let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
            for h in 0..heads {
                let (qs, ks, vs) = (h * dh, d + h * dh, 2 * d + h * dh);
                let q = cache.qkv.slice(s![.., qs..qs + dh]);
                let k = cache.qkv.slice(s![.., ks..ks + dh]);
                let v = cache.qkv.slice(s![.., vs..vs + dh]);
                let pr = &cache.probs[h];
                let do_h = d_o.slice(s![.., qs..qs + dh]);
                let dp = do_h.dot(&v.t());
                dqkv.slice_mut(s![.., vs..vs + dh]).assign(&pr.t().dot(&do_h));
                let row_dot = (&dp * pr).sum_axis(Axis(1));
                let mut ds = dp - &row_dot.insert_axis(Axis(1));
                ds *= pr;
                ds *= att_scale;
                dqkv.slice_mut(s![.., qs..qs + dh]).assign(&ds.dot(&k));
                dqkv.slice_mut(s![.., ks..ks + dh]).assign(&ds.t().dot(&q));
            }
            matmul_into(&cache.a.t(), &dqkv.view(), &mut mat_mut(lay, grads, ids_l.qkv_w));
            vec1_mut(lay, grads, ids_l.qkv_b).add_assign(&dqkv.sum_axis(Axis(0)));
            let da = dqkv.dot(&mat(lay, p, ids_l.qkv_w).t());
            dx += &layer_norm_backward(&da, &cache.ln1, vec1(lay, p, ids_l.ln1_g), lay, grads, (ids_l.ln1_g, ids_l.ln1_b));
        }
        if let Some(m) = &drop_emb {
            dx *= m;
        }
        for (t, row) in dx.rows().into_iter().enumerate() {
            let (id, ty) = (inputs[t] as usize, types[t].index());
            mat_mut(lay, grads, lay.wte).row_mut(id).add_assign(&row);
            mat_mut(lay, grads, lay.wpe).row_mut(t).add_assign(&row);
            mat_mut(lay, grads, lay.wtt).row_mut(ty).add_assign(&row);
        }
        Ok((total, rows.len()))
    }

    /// Logits of the token following `ids`, reusing and extending `state`.
    pub fn next_logits(
        &self,
        state: &mut KvState<F>,
        ids: &[TokenId],
        types: &[TokenType],
    ) -> Result<Array1<F>, ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        if ids.len() >= self.config.max_positions {
            return Err(ModelError::PrefixTooLong { len: ids.len(), max: self.config.max_positions });
        }
        self.check_inputs(ids, types, 0)?;
        let (lay, p) = (&self.layout, &self.params[..]);
        let c = &self.config;
        let (d, heads) = (c.hidden_dim, c.heads);
        let dh = d / heads;
        if state.keys.len() != c.layers {
            *state = KvState { keys: vec![Vec::new(); c.layers], values: vec![Vec::new(); c.layers], ..KvState::default() };
        }
        let mut common = state.ids.iter().zip(ids).zip(state.types.iter().zip(types)).take_while(|((a, b), (x, y))| a == b && x == y).count();
        if common == ids.len() && common == state.ids.len() {
            if let Some(l) = &state.last_logits {
                return Ok(l.clone());
            }
        }
        if common == ids.len() {
            common -= 1;
        }
        state.truncate(common, d);
        let new_ids = &ids[common..];
        let new_types = &types[common..];
        let n = new_ids.len();
        let total = common + n;
        let scale = self.attention_scale();
        let mut x = self.embed(new_ids, new_types, common);
        for (l, ids_l) in lay.layers.iter().enumerate() {
            let (a, _) = layer_norm(x.view(), vec1(lay, p, ids_l.ln1_g), vec1(lay, p, ids_l.ln1_b));
            let qkv = a.dot(&mat(lay, p, ids_l.qkv_w)) + &vec1(lay, p, ids_l.qkv_b);
            for row in qkv.rows() {
                state.keys[l].extend(row.slice(s![d..2 * d]).iter());
                state.values[l].extend(row.slice(s![2 * d..]).iter());
            }
            let keys = ArrayView2::from_shape((total, d), &state.keys[l][..]).expect("cache shape");
            let values = ArrayView2::from_shape((total, d), &state.values[l][..]).expect("cache shape");
            let mut o = Array2::zeros((n, d));
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let q = qkv.slice(s![.., cols.clone()]);
                let mut sc = q.dot(&keys.slice(s![.., cols.clone()]).t()) * scale;
                for i in 0..n {
                    sc.slice_mut(s![i, common + i + 1..]).fill(F::neg_infinity());
                }
                softmax_rows(&mut sc);
                o.slice_mut(s![.., cols.clone()]).assign(&sc.dot(&values.slice(s![.., cols])));
            }
            x += &(o.dot(&mat(lay, p, ids_l.out_w)) + &vec1(lay, p, ids_l.out_b));
            let (m, _) = layer_norm(x.view(), vec1(lay, p, ids_l.ln2_g), vec1(lay, p, ids_l.ln2_b));
            let g = (m.dot(&mat(lay, p, ids_l.fc_w)) + &vec1(lay, p, ids_l.fc_b)).mapv(gelu);
            x += &(g.dot(&mat(lay, p, ids_l.proj_w)) + &vec1(lay, p, ids_l.proj_b));
        }
        let last = x.slice(s![n - 1..n, ..]);
        let (xf, _) = layer_norm(last, vec1(lay, p, lay.lnf_g), vec1(lay, p, lay.lnf_b));
        let logits = mat(lay, p, lay.wte).dot(&xf.row(0));
        state.ids.extend_from_slice(new_ids);
        state.types.extend_from_slice(new_types);
        state.last_logits = Some(logits.clone());
        Ok(logits)
    }
}

/// Softmax in double precision.
pub fn softmax_f64<F: NdFloat>(logits: ArrayView1<F>) -> Vec<f64> {
    let v: Vec<f64> = logits.iter().map(|x| x.to_f64().expect("finite")).collect();
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl<F: NdFloat> LanguageModel for Transformer<F> {
    type State = KvState<F>;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_positions(&self) -> usize {
        self.config.max_positions
    }

    fn new_state(&self) -> KvState<F> {
        KvState::default()
    }

    fn next_token_distribution(
        &self,
        state: &mut KvState<F>,
        ids: &[TokenId],
        types: &[TokenType],
    ) -> Result<Vec<f64>, ModelError> {
        let logits = self.next_logits(state, ids, types)?;
        Ok(softmax_f64(logits.view()))
    }
}
