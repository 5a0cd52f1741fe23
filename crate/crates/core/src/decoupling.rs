//! Semantic-guided spatial attention that splits one global feature map into
//! a feature per category.
//!
//! For category `c` and position `s`:
//!
//! ```text
//! fused[c,s]  = P^T tanh((U^T f[s]) * (V^T x[c])) + b
//! logit[c,s]  = att_w . fused[c,s] + att_b
//! a[c,.]      = softmax_s(logit[c,.])
//! pooled[c]   = sum_s a[c,s] f[s]
//! feature[c]  = proj_w^T adapter(pooled[c]) + proj_b
//! ```
//!
//! The per-operation functions follow these formulas literally. The batched
//! [`DecoupleCache`] path used for training folds `P` into the attention
//! vector (`logit = tanh(..) . (P att_w) + (b . att_w + att_b)`), which is the
//! same map without materializing the `(C, S, d_f)` fused tensor.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView4, ArrayViewD, ArrayViewMutD, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureMap, SemanticVector};
use crate::error::{Error, Result};
use crate::init;
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecouplingDims {
    /// Channels of the visual feature map.
    pub channels: usize,
    /// Dimension of the semantic word vectors.
    pub semantic_dim: usize,
    pub joint_dim: usize,
    pub fused_dim: usize,
    pub text_dim: usize,
}

/// Trainable parameters of the decoupling module. Also used as the gradient
/// accumulator, since gradients share the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct DecouplingParams<T> {
    /// `(channels, joint_dim)`
    pub u: Array2<T>,
    /// `(semantic_dim, joint_dim)`
    pub v: Array2<T>,
    /// `(joint_dim, fused_dim)`
    pub p: Array2<T>,
    pub b: Array1<T>,
    pub att_w: Array1<T>,
    /// Length one.
    pub att_b: Array1<T>,
    /// `(fused_dim, text_dim)`
    pub proj_w: Array2<T>,
    pub proj_b: Array1<T>,
}

pub const PARAM_NAMES: [&str; 8] = ["u", "v", "p", "b", "att_w", "att_b", "proj_w", "proj_b"];

impl<T: Scalar> DecouplingParams<T> {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(dims: &DecouplingDims, seed: u64) -> Self {
        let mut rng = seed::rng(seed::child_seed(seed, 0xdec0_0001));
        let d = dims;
        Self {
            u: init::kaiming_uniform(&mut rng, (d.channels, d.joint_dim), d.channels, 1.0),
            v: init::kaiming_uniform(&mut rng, (d.semantic_dim, d.joint_dim), d.semantic_dim, 1.0),
            p: init::kaiming_uniform(&mut rng, (d.joint_dim, d.fused_dim), d.joint_dim, 1.0),
            b: Array1::zeros(d.fused_dim),
            att_w: init::kaiming_uniform(&mut rng, d.fused_dim, d.fused_dim, 1.0),
            att_b: Array1::zeros(1),
            proj_w: init::kaiming_uniform(&mut rng, (d.fused_dim, d.text_dim), d.fused_dim, 1.0),
            proj_b: Array1::zeros(d.text_dim),
        }
    }

    pub fn zeros(dims: &DecouplingDims) -> Self {
        let d = dims;
        Self {
            u: Array2::zeros((d.channels, d.joint_dim)),
            v: Array2::zeros((d.semantic_dim, d.joint_dim)),
            p: Array2::zeros((d.joint_dim, d.fused_dim)),
            b: Array1::zeros(d.fused_dim),
            att_w: Array1::zeros(d.fused_dim),
            att_b: Array1::zeros(1),
            proj_w: Array2::zeros((d.fused_dim, d.text_dim)),
            proj_b: Array1::zeros(d.text_dim),
        }
    }

    pub fn dims(&self) -> DecouplingDims {
        DecouplingDims {
            channels: self.u.nrows(),
            semantic_dim: self.v.nrows(),
            joint_dim: self.u.ncols(),
            fused_dim: self.p.ncols(),
            text_dim: self.proj_w.ncols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        let ok = self.v.ncols() == d.joint_dim
            && self.p.nrows() == d.joint_dim
            && self.b.len() == d.fused_dim
            && self.att_w.len() == d.fused_dim
            && self.att_b.len() == 1
            && self.proj_w.nrows() == d.fused_dim
            && self.proj_b.len() == d.text_dim;
        if !ok {
            return Err(Error::shape("decoupling parameter shapes are inconsistent"));
        }
        if self.tensors().iter().any(|(_, t)| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("decoupling parameters contain non-finite values"));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [(&'static str, ArrayViewD<'_, T>); 8] {
        [
            ("u", self.u.view().into_dyn()),
            ("v", self.v.view().into_dyn()),
            ("p", self.p.view().into_dyn()),
            ("b", self.b.view().into_dyn()),
            ("att_w", self.att_w.view().into_dyn()),
            ("att_b", self.att_b.view().into_dyn()),
            ("proj_w", self.proj_w.view().into_dyn()),
            ("proj_b", self.proj_b.view().into_dyn()),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, ArrayViewMutD<'_, T>); 8] {
        [
            ("u", self.u.view_mut().into_dyn()),
            ("v", self.v.view_mut().into_dyn()),
            ("p", self.p.view_mut().into_dyn()),
            ("b", self.b.view_mut().into_dyn()),
            ("att_w", self.att_w.view_mut().into_dyn()),
            ("att_b", self.att_b.view_mut().into_dyn()),
            ("proj_w", self.proj_w.view_mut().into_dyn()),
            ("proj_b", self.proj_b.view_mut().into_dyn()),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }
}

/// Frozen linear map from encoder channels to the fused dimension, present
/// only when the two differ.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAdapter<T> {
    /// `(channels, fused_dim)`
    weight: Option<Array2<T>>,
}

impl<T: Scalar> ChannelAdapter<T> {
    pub fn identity() -> Self {
        Self { weight: None }
    }

    pub fn for_dims(channels: usize, fused_dim: usize, seed: u64) -> Self {
        if channels == fused_dim {
            return Self::identity();
        }
        let mut rng = seed::rng(seed::child_seed(seed, 0xada9_0001));
        Self {
            weight: Some(init::kaiming_uniform(&mut rng, (channels, fused_dim), channels, 3f64.sqrt())),
        }
    }

    pub fn from_weight(weight: Option<Array2<T>>) -> Self {
        Self { weight }
    }

    pub fn weight(&self) -> Option<&Array2<T>> {
        self.weight.as_ref()
    }

    pub fn apply(&self, pooled: ArrayView2<'_, T>) -> Array2<T> {
        match &self.weight {
            Some(w) => pooled.dot(w),
            None => pooled.to_owned(),
        }
    }

    pub fn apply_one(&self, pooled: ArrayView1<'_, T>) -> Array1<T> {
        match &self.weight {
            Some(w) => pooled.dot(w),
            None => pooled.to_owned(),
        }
    }

    fn backward(&self, grad: Array2<T>) -> Array2<T> {
        match &self.weight {
            Some(w) => grad.dot(&w.t()),
            None => grad,
        }
    }
}

/// Per-category spatial attention, shape `(C, W, H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    coefficients: Array3<T>,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn coefficients(&self) -> &Array3<T> {
        &self.coefficients
    }

    pub fn num_categories(&self) -> usize {
        self.coefficients.dim().0
    }

    pub fn category(&self, c: usize) -> ndarray::ArrayView2<'_, T> {
        self.coefficients.index_axis(Axis(0), c)
    }
}

/// Category-specific visual feature in the text embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryFeature<T> {
    pub data: Array1<T>,
}

fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(format!("{what} has dimension {got}, expected {want}")));
    }
    Ok(())
}

/// Low-rank bilinear fusion of one local feature with one semantic vector.
pub fn fuse_bilinear<T: Scalar>(
    f_wh: ArrayView1<'_, T>,
    x_c: ArrayView1<'_, T>,
    params: &DecouplingParams<T>,
) -> Result<Array1<T>> {
    check_dim("local feature", f_wh.len(), params.u.nrows())?;
    check_dim("semantic vector", x_c.len(), params.v.nrows())?;
    let joint = (f_wh.dot(&params.u) * x_c.dot(&params.v)).mapv(T::tanh);
    Ok(joint.dot(&params.p) + &params.b)
}

/// Applies the attention head at every `(c, w, h)` of a `(C, W, H, d_f)` tensor.
pub fn attention_logits<T: Scalar>(
    fused: ArrayView4<'_, T>,
    params: &DecouplingParams<T>,
) -> Result<Array3<T>> {
    let (c, w, h, d) = fused.dim();
    check_dim("fused feature", d, params.att_w.len())?;
    let bias = params.att_b[0];
    Ok(Array3::from_shape_fn((c, w, h), |(ci, wi, hi)| {
        fused.slice(s![ci, wi, hi, ..]).dot(&params.att_w) + bias
    }))
}

/// Softmax over `(w, h)` for each category, stabilized by max subtraction.
pub fn normalize_attention<T: Scalar>(logits: Array3<T>) -> AttentionMap<T> {
    let mut coefficients = logits;
    for mut plane in coefficients.outer_iter_mut() {
        softmax_inplace(plane.view_mut().into_dyn());
    }
    AttentionMap { coefficients }
}

pub(crate) fn softmax_inplace<T: Scalar>(mut v: ArrayViewMutD<'_, T>) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    v.mapv_inplace(|x| (x - max).exp());
    let sum = v.sum();
    v.mapv_inplace(|x| x / sum);
}

/// Attention-weighted sum of the local features for category `c`.
pub fn attention_pool<T: Scalar>(fmap: &FeatureMap<T>, amap: &AttentionMap<T>, c: usize) -> Result<Array1<T>> {
    let (nc, w, h) = amap.coefficients.dim();
    if c >= nc {
        return Err(Error::invalid(format!("category {c} out of range for {nc} attention maps")));
    }
    if (w, h) != (fmap.width(), fmap.height()) {
        return Err(Error::shape("attention map and feature map extents differ"));
    }
    let mut out = Array1::zeros(fmap.channels());
    for wi in 0..w {
        for hi in 0..h {
            out.scaled_add(amap.coefficients[[c, wi, hi]], &fmap.at(wi, hi));
        }
    }
    Ok(out)
}

/// Output of [`decouple`]: one feature per category plus the attention maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoupled<T> {
    pub features: Vec<CategoryFeature<T>>,
    pub attention: AttentionMap<T>,
}

/// Stacks semantic vectors into a `(C, D)` matrix.
pub fn semantic_matrix<T: Scalar>(semantics: &[SemanticVector<T>]) -> Result<Array2<T>> {
    let d = semantics.first().map_or(0, SemanticVector::dim);
    let mut out = Array2::zeros((semantics.len(), d));
    for (c, x) in semantics.iter().enumerate() {
        check_dim("semantic vector", x.dim(), d)?;
        out.row_mut(c).assign(x.data());
    }
    Ok(out)
}

/// Splits the global feature map into one feature per category.
pub fn decouple<T: Scalar>(
    fmap: &FeatureMap<T>,
    semantics: &[SemanticVector<T>],
    params: &DecouplingParams<T>,
    adapter: &ChannelAdapter<T>,
) -> Result<Decoupled<T>> {
    if semantics.is_empty() {
        return Err(Error::invalid("decouple needs at least one category"));
    }
    let x = semantic_matrix(semantics)?;
    check_dim("semantic vector", x.ncols(), params.v.nrows())?;
    check_dim("feature map channels", fmap.channels(), params.u.nrows())?;
    let positions = fmap.positions();
    let joint_sem = x.dot(&params.v);
    let cache = DecoupleCache::forward(positions.view(), joint_sem.view(), params, adapter)?;
    let attention = cache.attention_map(fmap.width(), fmap.height());
    let features = cache
        .features
        .outer_iter()
        .map(|r| CategoryFeature { data: r.to_owned() })
        .collect();
    Ok(Decoupled { features, attention })
}

/// Intermediate values of the batched forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct DecoupleCache<T> {
    /// `U^T f[s]`, `(S, d_j)`
    joint_vis: Array2<T>,
    /// `tanh(joint_vis[s] * joint_sem[c])`, `(C, S, d_j)`
    joint: Array3<T>,
    /// softmax coefficients, `(C, S)`
    pub attention: Array2<T>,
    /// `(C, channels)`
    pooled: Array2<T>,
    /// `(C, d_f)`
    adapted: Array2<T>,
    /// `(C, d_t)`
    pub features: Array2<T>,
}

impl<T: Scalar> DecoupleCache<T> {
    /// `positions` is `(S, channels)`; `joint_sem` is `V^T x[c]` stacked, `(C, d_j)`.
    pub fn forward(
        positions: ArrayView2<'_, T>,
        joint_sem: ArrayView2<'_, T>,
        params: &DecouplingParams<T>,
        adapter: &ChannelAdapter<T>,
    ) -> Result<Self> {
        check_dim("feature map channels", positions.ncols(), params.u.nrows())?;
        check_dim("semantic projection", joint_sem.ncols(), params.u.ncols())?;
        let (s_len, c_len, d_j) = (positions.nrows(), joint_sem.nrows(), params.u.ncols());
        let joint_vis = positions.dot(&params.u);
        let att_joint = params.p.dot(&params.att_w);
        let att_bias = params.b.dot(&params.att_w) + params.att_b[0];

        let mut joint = Array3::zeros((c_len, s_len, d_j));
        let mut attention = Array2::zeros((c_len, s_len));
        for c in 0..c_len {
            let sem = joint_sem.row(c);
            let mut block = joint.index_axis_mut(Axis(0), c);
            Zip::from(block.rows_mut())
                .and(joint_vis.rows())
                .for_each(|mut out, vis| {
                    Zip::from(&mut out).and(&vis).and(&sem).for_each(|o, &a, &b| *o = (a * b).tanh());
                });
            let mut logits = block.dot(&att_joint);
            logits += att_bias;
            softmax_inplace(logits.view_mut().into_dyn());
            attention.row_mut(c).assign(&logits);
        }
        let pooled = attention.dot(&positions);
        let adapted = adapter.apply(pooled.view());
        let features = adapted.dot(&params.proj_w) + &params.proj_b;
        Ok(Self {
            joint_vis,
            joint,
            attention,
            pooled,
            adapted,
            features,
        })
    }

    pub fn attention_map(&self, width: usize, height: usize) -> AttentionMap<T> {
        let c = self.attention.nrows();
        AttentionMap {
            coefficients: self
                .attention
                .clone()
                .into_shape_with_order((c, width, height))
                .expect("attention covers every position"),
        }
    }

    pub fn pooled(&self) -> &Array2<T> {
        &self.pooled
    }

    /// Accumulates parameter gradients into `grads` given `dL/dfeatures`
    /// (`(C, d_t)`) and returns `dL/djoint_sem` (`(C, d_j)`), from which the
    /// caller forms the `V` gradient once per batch.
    pub fn backward(
        &self,
        positions: ArrayView2<'_, T>,
        joint_sem: ArrayView2<'_, T>,
        params: &DecouplingParams<T>,
        adapter: &ChannelAdapter<T>,
        grad_features: ArrayView2<'_, T>,
        grads: &mut DecouplingParams<T>,
    ) -> Array2<T> {
        let (c_len, s_len, d_j) = self.joint.dim();

        // projection head
        grads.proj_w += &self.adapted.t().dot(&grad_features);
        grads.proj_b += &grad_features.sum_axis(Axis(0));
        let grad_adapted = grad_features.dot(&params.proj_w.t());
        let grad_pooled = adapter.backward(grad_adapted);

        // pooling and softmax: d a[c,s] = f[s] . dpooled[c]
        let grad_att = grad_pooled.dot(&positions.t());
        let mut grad_logits = Array2::zeros((c_len, s_len));
        for c in 0..c_len {
            let a = self.attention.row(c);
            let g = grad_att.row(c);
            let inner = a.dot(&g);
            Zip::from(grad_logits.row_mut(c))
                .and(&a)
                .and(&g)
                .for_each(|o, &ai, &gi| *o = ai * (gi - inner));
        }

        // attention head through the folded vector q = P att_w
        let att_joint = params.p.dot(&params.att_w);
        let total = grad_logits.sum();
        let mut joint_sum = Array1::<T>::zeros(d_j);
        let mut grad_vis = Array2::<T>::zeros((s_len, d_j));
        let mut grad_sem = Array2::<T>::zeros((c_len, d_j));
        for c in 0..c_len {
            let block = self.joint.index_axis(Axis(0), c);
            let gl = grad_logits.row(c);
            joint_sum += &block.t().dot(&gl);
            let sem = joint_sem.row(c);
            let mut sem_acc = grad_sem.row_mut(c);
            for s in 0..s_len {
                let glog = gl[s];
                let z = block.row(s);
                let vis = self.joint_vis.row(s);
                let mut gv = grad_vis.row_mut(s);
                for j in 0..d_j {
                    let pre = glog * att_joint[j] * (T::one() - z[j] * z[j]);
                    gv[j] += pre * sem[j];
                    sem_acc[j] += pre * vis[j];
                }
            }
        }
        // q = P att_w and k = b . att_w + att_b
        Zip::from(grads.p.rows_mut())
            .and(&joint_sum)
            .for_each(|mut row, &js| row.scaled_add(js, &params.att_w));
        grads.att_w += &params.p.t().dot(&joint_sum);
        grads.att_w.scaled_add(total, &params.b);
        grads.att_b[0] += total;
        grads.b.scaled_add(total, &params.att_w);
        grads.u += &positions.t().dot(&grad_vis);
        grad_sem
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn dims() -> DecouplingDims {
        DecouplingDims {
            channels: 5,
            semantic_dim: 4,
            joint_dim: 6,
            fused_dim: 5,
            text_dim: 3,
        }
    }

    fn wave(shape: (usize, usize, usize), phase: f64) -> Array3<f64> {
        Array3::from_shape_fn(shape, |(a, b, c)| ((a * 13 + b * 7 + c * 3) as f64 * 0.61 + phase).sin())
    }

    fn fmap() -> FeatureMap<f64> {
        FeatureMap::new(wave((5, 2, 2), 0.3)).unwrap()
    }

    fn semantics(c: usize) -> Vec<SemanticVector<f64>> {
        (0..c)
            .map(|i| SemanticVector::new(Array1::from_shape_fn(4, |j| ((i * 4 + j) as f64 * 1.3).cos())).unwrap())
            .collect()
    }

    fn params() -> DecouplingParams<f64> {
        let mut p = DecouplingParams::init(&dims(), 5);
        p.b = Array1::from_shape_fn(5, |i| 0.1 * i as f64 - 0.2);
        p.att_b[0] = 0.3;
        p.proj_b = Array1::from_shape_fn(3, |i| 0.05 * i as f64);
        p
    }

    #[test]
    fn zero_semantic_vector_gives_bias_free_zero() {
        let mut p = params();
        p.b.fill(0.0);
        let f = Array1::from_elem(5, 0.7);
        let out = fuse_bilinear(f.view(), Array1::zeros(4).view(), &p).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_local_feature_gives_bias() {
        let p = params();
        let x = Array1::from_elem(4, 1.1);
        let out = fuse_bilinear(Array1::zeros(5).view(), x.view(), &p).unwrap();
        assert_eq!(out, p.b);
    }

    #[test]
    fn fuse_matches_scalar_loops() {
        let p = params();
        let f = Array1::from_shape_fn(5, |i| (i as f64 * 0.9).sin());
        let x = Array1::from_shape_fn(4, |i| (i as f64 * 0.4).cos());
        let got = fuse_bilinear(f.view(), x.view(), &p).unwrap();
        for k in 0..5 {
            let mut acc = p.b[k];
            for j in 0..6 {
                let mut uf = 0.0;
                for n in 0..5 {
                    uf += p.u[[n, j]] * f[n];
                }
                let mut vx = 0.0;
                for d in 0..4 {
                    vx += p.v[[d, j]] * x[d];
                }
                acc += p.p[[j, k]] * (uf * vx).tanh();
            }
            assert!((acc - got[k]).abs() < 1e-10);
        }
        assert!(fuse_bilinear(Array1::zeros(4).view(), x.view(), &p).is_err());
    }

    #[test]
    fn constant_attention_head() {
        let mut p = params();
        p.att_w.fill(0.0);
        p.att_b[0] = -1.5;
        let fused = Array4::from_shape_fn((2, 3, 2, 5), |(a, b, c, d)| (a + b + c + d) as f64);
        let logits = attention_logits(fused.view(), &p).unwrap();
        assert!(logits.iter().all(|&v| v == -1.5));
        let single = attention_logits(Array4::zeros((3, 1, 1, 5)).view(), &p).unwrap();
        assert_eq!(single.dim(), (3, 1, 1));
    }

    #[test]
    fn logits_match_scalar_loops() {
        let p = params();
        let fused = Array4::from_shape_fn((2, 2, 3, 5), |(a, b, c, d)| ((a * 31 + b * 11 + c * 5 + d) as f64).sin());
        let logits = attention_logits(fused.view(), &p).unwrap();
        for ((ci, wi, hi), &got) in logits.indexed_iter() {
            let mut acc = p.att_b[0];
            for k in 0..5 {
                acc += fused[[ci, wi, hi, k]] * p.att_w[k];
            }
            assert!((acc - got).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_examples() {
        let uni = normalize_attention(Array3::from_elem((1, 2, 2), 3.0f64));
        assert!(uni.coefficients().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let two = normalize_attention(Array3::from_shape_vec((1, 2, 1), vec![0.0, 3f64.ln()]).unwrap());
        assert!((two.coefficients()[[0, 0, 0]] - 0.25).abs() < 1e-15);
        assert!((two.coefficients()[[0, 1, 0]] - 0.75).abs() < 1e-15);
        let sharp = normalize_attention(Array3::from_shape_vec((1, 2, 1), vec![20.0, 0.0]).unwrap());
        let tail = 1.0 / (1.0 + 20f64.exp());
        assert!((sharp.coefficients()[[0, 1, 0]] - tail).abs() < 1e-20);
        assert!((tail - 2.061e-9).abs() < 1e-12);
        let huge = normalize_attention(Array3::from_shape_vec((1, 2, 1), vec![1000.0f64, 999.0]).unwrap());
        assert!(huge.coefficients().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pooling_identities() {
        let fm = fmap();
        let mut one_hot = Array3::zeros((1, 2, 2));
        one_hot[[0, 1, 0]] = 1.0;
        let amap = AttentionMap { coefficients: one_hot };
        assert_eq!(attention_pool(&fm, &amap, 0).unwrap(), fm.at(1, 0).to_owned());

        let uniform = AttentionMap { coefficients: Array3::from_elem((1, 2, 2), 0.25) };
        let mean = fm.data().mean_axis(Axis(2)).unwrap().mean_axis(Axis(1)).unwrap();
        let pooled = attention_pool(&fm, &uniform, 0).unwrap();
        assert!((pooled - mean).iter().all(|v| v.abs() < 1e-12));
        assert!(attention_pool(&fm, &uniform, 1).is_err());
    }

    /// Composition of the literal per-operation functions.
    fn decouple_by_ops(fm: &FeatureMap<f64>, sem: &[SemanticVector<f64>], p: &DecouplingParams<f64>, adapter: &ChannelAdapter<f64>) -> Vec<Array1<f64>> {
        let (w, h) = (fm.width(), fm.height());
        let mut fused = Array4::zeros((sem.len(), w, h, p.p.ncols()));
        for (c, x) in sem.iter().enumerate() {
            for wi in 0..w {
                for hi in 0..h {
                    let f = fuse_bilinear(fm.at(wi, hi), x.data().view(), p).unwrap();
                    fused.slice_mut(s![c, wi, hi, ..]).assign(&f);
                }
            }
        }
        let amap = normalize_attention(attention_logits(fused.view(), p).unwrap());
        (0..sem.len())
            .map(|c| {
                let pooled = attention_pool(fm, &amap, c).unwrap();
                adapter.apply_one(pooled.view()).dot(&p.proj_w) + &p.proj_b
            })
            .collect()
    }

    #[test]
    fn batched_path_matches_operation_composition() {
        let p = params();
        let sem = semantics(3);
        for adapter in [ChannelAdapter::identity(), ChannelAdapter { weight: Some(Array2::from_shape_fn((5, 5), |(i, j)| ((i + 2 * j) as f64).sin())) }] {
            let fast = decouple(&fmap(), &sem, &p, &adapter).unwrap();
            let slow = decouple_by_ops(&fmap(), &sem, &p, &adapter);
            for (a, b) in fast.features.iter().zip(&slow) {
                assert!((&a.data - b).iter().all(|v| v.abs() < 1e-10));
            }
            for plane in fast.attention.coefficients().outer_iter() {
                assert!((plane.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn categories_are_independent() {
        let p = params();
        let mut sem = semantics(3);
        let base = decouple(&fmap(), &sem, &p, &ChannelAdapter::identity()).unwrap();
        sem[1] = SemanticVector::new(Array1::from_elem(4, -2.0)).unwrap();
        let moved = decouple(&fmap(), &sem, &p, &ChannelAdapter::identity()).unwrap();
        assert_eq!(base.features[0], moved.features[0]);
        assert_eq!(base.features[2], moved.features[2]);
        assert_ne!(base.features[1], moved.features[1]);

        let dup = vec![sem[0].clone(), sem[0].clone()];
        let out = decouple(&fmap(), &dup, &p, &ChannelAdapter::identity()).unwrap();
        assert_eq!(out.features[0], out.features[1]);

        let single = decouple(&fmap(), &sem[..1], &p, &ChannelAdapter::identity()).unwrap();
        assert_eq!(single.features.len(), 1);
        assert_eq!(single.features[0], moved.features[0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = params();
        let sem = semantic_matrix(&semantics(3)).unwrap();
        let fm = fmap();
        let pos = fm.positions();
        let adapter = ChannelAdapter::for_dims(5, 5, 0);
        let probe = Array2::from_shape_fn((3, 3), |(a, b)| ((a * 3 + b) as f64 * 0.77).cos());
        let loss = |p: &DecouplingParams<f64>| {
            let js = sem.dot(&p.v);
            let cache = DecoupleCache::forward(pos.view(), js.view(), p, &adapter).unwrap();
            (&cache.features * &probe).sum()
        };
        let js = sem.dot(&p.v);
        let cache = DecoupleCache::forward(pos.view(), js.view(), &p, &adapter).unwrap();
        let mut grads = DecouplingParams::zeros(&p.dims());
        let grad_sem = cache.backward(pos.view(), js.view(), &p, &adapter, probe.view(), &mut grads);
        grads.v += &sem.t().dot(&grad_sem);

        let h = 1e-5;
        let mut probe_params = p.clone();
        for (ti, name) in PARAM_NAMES.iter().enumerate() {
            let n = p.tensors()[ti].1.len();
            for k in 0..n {
                let orig = probe_params.tensors()[ti].1.iter().nth(k).copied().unwrap();
                let set = |pp: &mut DecouplingParams<f64>, v: f64| {
                    *pp.tensors_mut()[ti].1.iter_mut().nth(k).unwrap() = v;
                };
                set(&mut probe_params, orig + h);
                let up = loss(&probe_params);
                set(&mut probe_params, orig - h);
                let dn = loss(&probe_params);
                set(&mut probe_params, orig);
                let fd = (up - dn) / (2.0 * h);
                let an = grads.tensors()[ti].1.iter().nth(k).copied().unwrap();
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{k}]: fd {fd} vs analytic {an}");
            }
        }
    }
}
