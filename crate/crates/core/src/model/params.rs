//! Flat parameter storage. Every tensor lives in one contiguous buffer so
//! that the optimizer, gradient clipping and checkpointing work on a single
//! slice.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{cast, ModelConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct LayerIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Layout {
    pub specs: Vec<TensorSpec>,
    pub wte: usize,
    pub wpe: usize,
    pub wtt: usize,
    pub layers: Vec<LayerIds>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut specs: Vec<TensorSpec> = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec { name, shape, offset: total };
            total += spec.len();
            specs.push(spec);
            specs.len() - 1
        };
        let (d, f) = (c.hidden_dim, c.ff_dim);
        let wte = add("wte".into(), vec![c.vocab_size, d]);
        let wpe = add("wpe".into(), vec![c.max_positions, d]);
        let wtt = add("wtt".into(), vec![c.token_type_count, d]);
        let layers = (0..c.layers)
            .map(|l| LayerIds {
                ln1_g: add(format!("h{l}.ln1.g"), vec![d]),
                ln1_b: add(format!("h{l}.ln1.b"), vec![d]),
                qkv_w: add(format!("h{l}.attn.qkv.w"), vec![d, 3 * d]),
                qkv_b: add(format!("h{l}.attn.qkv.b"), vec![3 * d]),
                out_w: add(format!("h{l}.attn.out.w"), vec![d, d]),
                out_b: add(format!("h{l}.attn.out.b"), vec![d]),
                ln2_g: add(format!("h{l}.ln2.g"), vec![d]),
                ln2_b: add(format!("h{l}.ln2.b"), vec![d]),
                fc_w: add(format!("h{l}.mlp.fc.w"), vec![d, f]),
                fc_b: add(format!("h{l}.mlp.fc.b"), vec![f]),
                proj_w: add(format!("h{l}.mlp.proj.w"), vec![f, d]),
                proj_b: add(format!("h{l}.mlp.proj.b"), vec![d]),
            })
            .collect();
        let lnf_g = add("lnf.g".into(), vec![d]);
        let lnf_b = add("lnf.b".into(), vec![d]);
        Layout { specs, wte, wpe, wtt, layers, lnf_g, lnf_b, total }
    }

    pub fn range(&self, id: usize) -> std::ops::Range<usize> {
        let s = &self.specs[id];
        s.offset..s.offset + s.len()
    }

    /// Initial values: N(0, 0.02) matrices, residual projections scaled by
    /// 1/sqrt(2 * layers), zero biases and unit norm gains.
    pub fn init<F: NdFloat>(&self, c: &ModelConfig) -> Vec<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut params = vec![F::zero(); self.total];
        let normal = Normal::new(0.0, c.init_std).expect("finite std");
        let resid = (2.0 * c.layers.max(1) as f64).sqrt();
        for spec in &self.specs {
            let slot = &mut params[spec.offset..spec.offset + spec.len()];
            let leaf = spec.name.rsplit('.').next().unwrap_or("");
            if spec.name.ends_with(".g") {
                slot.fill(F::one());
            } else if spec.shape.len() == 2 {
                let scale = if spec.name.contains("out.w") || spec.name.contains("proj.w") { resid } else { 1.0 };
                for v in slot.iter_mut() {
                    *v = cast(normal.sample(&mut rng) / scale);
                }
            } else {
                debug_assert_eq!(leaf, "b");
            }
        }
        params
    }
}

pub(crate) fn mat<'a, F>(layout: &Layout, buf: &'a [F], id: usize) -> ArrayView2<'a, F> {
    let s = &layout.specs[id];
    ArrayView2::from_shape((s.shape[0], s.shape[1]), &buf[layout.range(id)]).expect("layout shape")
}

pub(crate) fn vec1<'a, F>(layout: &Layout, buf: &'a [F], id: usize) -> ArrayView1<'a, F> {
    ArrayView1::from(&buf[layout.range(id)])
}

pub(crate) fn mat_mut<'a, F>(layout: &Layout, buf: &'a mut [F], id: usize) -> ArrayViewMut2<'a, F> {
    let s = &layout.specs[id];
    let shape = (s.shape[0], s.shape[1]);
    ArrayViewMut2::from_shape(shape, &mut buf[layout.range(id)]).expect("layout shape")
}

pub(crate) fn vec1_mut<'a, F>(layout: &Layout, buf: &'a mut [F], id: usize) -> ArrayViewMut1<'a, F> {
    ArrayViewMut1::from(&mut buf[layout.range(id)])
}
