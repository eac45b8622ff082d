//! Embedding network and auxiliary heads.
//!
//! The backbone is three `conv 3×3 → ReLU → 2×2 max-pool` blocks
//! (channels `c1 → c2 → d`). Its final map is average-pooled down to
//! `pool_target` per side when larger, then flattened into spatial features
//! `[B, HW, d]`; the global features `[B, d]` are their mean over locations.
//!
//! The auxiliary heads (projection, value, query, key) are one-hidden-layer
//! ReLU perceptrons `d → d → d′`. They only exist during pre-training.

use rand::Rng;
use scl_autodiff::{Bound, Graph, ParamStore, Reduction, Tensor, Var, NORM_EPS};

use crate::error::{config, contract};
use crate::rng::Stream;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_channels: usize,
    /// Pixels per side of the (square) input.
    pub input_size: usize,
    /// `d`: channels of the final feature map.
    pub feature_dim: usize,
    /// `d′`: output width of every auxiliary head.
    pub head_dim: usize,
    /// Maps with more than this many locations per side are adaptively
    /// average-pooled down to it.
    pub pool_target: usize,
    /// Widths of the first two conv blocks.
    pub conv_channels: [usize; 2],
}

impl ModelConfig {
    /// Desk-scale network for 16×16 RGB inputs (2×2 final map).
    pub fn desk() -> Self {
        Self {
            input_channels: 3,
            input_size: 16,
            feature_dim: 64,
            head_dim: 16,
            pool_target: 3,
            conv_channels: [16, 32],
        }
    }

    /// Published feature widths (d = 640, d′ = 80) on 84-pixel inputs.
    pub fn paper() -> Self {
        Self {
            input_channels: 3,
            input_size: 84,
            feature_dim: 640,
            head_dim: 80,
            pool_target: 5,
            conv_channels: [160, 320],
        }
    }

    /// Side of the map produced by the conv blocks, before adaptive pooling.
    pub fn conv_side(&self) -> usize {
        self.input_size / 8
    }

    /// `H = W` of the spatial features.
    pub fn spatial_side(&self) -> usize {
        self.conv_side().min(self.pool_target)
    }

    pub fn locations(&self) -> usize {
        self.spatial_side() * self.spatial_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim < 1 || self.feature_dim < self.head_dim {
            return Err(config(format!(
                "need d >= d' >= 1, got d={} d'={}",
                self.feature_dim, self.head_dim
            )));
        }
        if self.input_channels == 0 || self.conv_channels.contains(&0) {
            return Err(config("channel counts must be positive"));
        }
        if self.conv_side() == 0 || self.pool_target == 0 {
            return Err(config(format!(
                "input size {} leaves no spatial map",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// Fan-in scaled uniform init, `U(±sqrt(6 / fan_in))`.
fn init_weight(shape: &[usize], fan_in: usize, rng: &mut Stream) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .unwrap()
}

/// Spatial and global features as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePack {
    /// `[B, HW, d]`
    pub spatial: Tensor,
    /// `[B, d]`
    pub global: Tensor,
}

impl FeaturePack {
    pub fn batch(&self) -> usize {
        self.global.shape()[0]
    }
}

/// Spatial and global features as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    pub spatial: Var,
    pub global: Var,
}

/// Parameters φ of the embedding network.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: ModelConfig,
    store: ParamStore,
}

impl Backbone {
    pub fn new(config: ModelConfig, rng: &mut Stream) -> Result<Self> {
        config.validate()?;
        let widths = [
            config.input_channels,
            config.conv_channels[0],
            config.conv_channels[1],
            config.feature_dim,
        ];
        let mut store = ParamStore::new();
        for l in 0..3 {
            let (cin, cout) = (widths[l], widths[l + 1]);
            store.push(
                format!("conv{}.weight", l + 1),
                init_weight(&[cout, cin, 3, 3], cin * 9, rng),
                true,
            );
            store.push(format!("conv{}.bias", l + 1), Tensor::zeros(&[cout]), false);
        }
        Ok(Self { config, store })
    }

    /// Rebuilds a backbone from named tensors, checking every shape.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config, &mut crate::rng::stream(0, "shape-probe", &[]))?;
        if reference.store.len() != store.len() {
            return Err(contract(format!(
                "expected {} backbone tensors, got {}",
                reference.store.len(),
                store.len()
            )));
        }
        for (a, b) in reference.store.iter().zip(store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(contract(format!(
                    "tensor {}{:?} does not match expected {}{:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        Ok(Self { config, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Runs `x: [B, C, S, S]` through the network on `g`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<FeatureVars> {
        let c = &self.config;
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != c.input_channels || s[2] != c.input_size || s[3] != c.input_size
        {
            return Err(config(format!(
                "input shape {s:?} does not match model [B, {}, {}, {}]",
                c.input_channels, c.input_size, c.input_size
            )));
        }
        let batch = s[0];
        let mut h = x;
        for l in 0..3 {
            h = g.conv2d(h, p.var(2 * l), p.var(2 * l + 1), 1, 1)?;
            h = g.relu(h);
            h = g.max_pool2d(h, 2, 2)?;
        }
        let side = c.spatial_side();
        if g.shape(h)[2] > side {
            h = g.adaptive_avg_pool2d(h, side, side)?;
        }
        let hw = side * side;
        let flat = g.reshape(h, &[batch, c.feature_dim, hw])?;
        let spatial = g.permute(flat, &[0, 2, 1])?;
        let global = g.reduce(spatial, Reduction::Mean, 1)?;
        Ok(FeatureVars { spatial, global })
    }

    /// Frozen forward pass.
    pub fn embed(&self, images: &Tensor) -> Result<FeaturePack> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(images.clone());
        let f = self.forward(&mut g, &p, x)?;
        Ok(FeaturePack {
            spatial: g.value(f.spatial).clone(),
            global: g.value(f.global).clone(),
        })
    }
}

/// `x·W + b` with `W: [in, out]`.
fn linear(g: &mut Graph, p: &Bound, w: usize, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.var(w))?;
    Ok(g.add_bias(y, p.var(w + 1))?)
}

fn push_linear(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut Stream) {
    store.push(
        format!("{name}.weight"),
        init_weight(&[din, dout], din, rng),
        true,
    );
    store.push(format!("{name}.bias"), Tensor::zeros(&[dout]), false);
}

/// The four heads ψ, each `Linear(d, d) → ReLU → Linear(d, d′)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxHeads {
    feature_dim: usize,
    head_dim: usize,
    store: ParamStore,
}

/// Per-location attention inputs, each `[B, HW, d′]`. `value` rows are
/// ℓ2-normalised.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub value: Var,
    pub query: Var,
    pub key: Var,
}

impl AuxHeads {
    pub const NAMES: [&'static str; 4] = ["projection", "value", "query", "key"];
    const PROJECTION: usize = 0;
    const VALUE: usize = 4;
    const QUERY: usize = 8;
    const KEY: usize = 12;

    pub fn new(feature_dim: usize, head_dim: usize, rng: &mut Stream) -> Result<Self> {
        if head_dim < 1 || feature_dim < head_dim {
            return Err(config(format!(
                "need d >= d' >= 1, got d={feature_dim} d'={head_dim}"
            )));
        }
        let mut store = ParamStore::new();
        for name in Self::NAMES {
            push_linear(
                &mut store,
                &format!("{name}.hidden"),
                feature_dim,
                feature_dim,
                rng,
            );
            push_linear(
                &mut store,
                &format!("{name}.out"),
                feature_dim,
                head_dim,
                rng,
            );
        }
        Ok(Self {
            feature_dim,
            head_dim,
            store,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Copies the projection head's weights into the value head.
    pub fn tie_value_to_projection(&mut self) {
        for i in 0..4 {
            let v = self.store.get(Self::PROJECTION + i).value.clone();
            self.store.get_mut(Self::VALUE + i).value = v;
        }
    }

    fn mlp(&self, g: &mut Graph, p: &Bound, base: usize, x: Var) -> Result<Var> {
        let h = linear(g, p, base, x)?;
        let h = g.relu(h);
        linear(g, p, base + 2, h)
    }

    /// `f = p(z^g)` for `z_g: [B, d]`; not normalised.
    pub fn project(&self, g: &mut Graph, p: &Bound, z_global: Var) -> Result<Var> {
        self.mlp(g, p, Self::PROJECTION, z_global)
    }

    /// Applies the value, query and key heads at every location of `z_s: [B, HW, d]`.
    pub fn attention(&self, g: &mut Graph, p: &Bound, z_spatial: Var) -> Result<AttentionVars> {
        let s = g.shape(z_spatial).to_vec();
        if s.len() != 3 || s[2] != self.feature_dim {
            return Err(contract(format!(
                "spatial features {s:?} do not end in d={}",
                self.feature_dim
            )));
        }
        let flat = g.reshape(z_spatial, &[s[0] * s[1], s[2]])?;
        let mut heads = [flat; 3];
        for (slot, base) in heads.iter_mut().zip([Self::VALUE, Self::QUERY, Self::KEY]) {
            let y = self.mlp(g, p, base, flat)?;
            *slot = g.reshape(y, &[s[0], s[1], self.head_dim])?;
        }
        let value = g.l2_normalize(heads[0], NORM_EPS)?;
        Ok(AttentionVars {
            value,
            query: heads[1],
            key: heads[2],
        })
    }
}

/// Linear classifier on global features, used for the CE term.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    store: ParamStore,
}

impl LinearHead {
    pub fn new(feature_dim: usize, classes: usize, rng: &mut Stream) -> Self {
        let mut store = ParamStore::new();
        push_linear(&mut store, "classifier", feature_dim, classes, rng);
        Self { store }
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let ok = store.len() == 2
            && store.get(0).name == "classifier.weight"
            && store.get(1).name == "classifier.bias"
            && store.get(0).value.rank() == 2
            && store.get(1).value.shape() == [store.get(0).value.shape()[1]];
        if !ok {
            return Err(contract("malformed classifier tensors"));
        }
        Ok(Self { store })
    }

    pub fn classes(&self) -> usize {
        self.store.get(0).value.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.store.get(0).value.shape()[0]
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn logits(&self, g: &mut Graph, p: &Bound, z_global: Var) -> Result<Var> {
        linear(g, p, 0, z_global)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small() -> ModelConfig {
        ModelConfig {
            input_channels: 2,
            input_size: 16,
            feature_dim: 6,
            head_dim: 3,
            pool_target: 3,
            conv_channels: [3, 4],
        }
    }

    fn images(b: usize, cfg: &ModelConfig, seed: u64) -> Tensor {
        let n = b * cfg.input_channels * cfg.input_size * cfg.input_size;
        let mut r = stream(seed, "img", &[]);
        Tensor::new(
            vec![b, cfg.input_channels, cfg.input_size, cfg.input_size],
            (0..n).map(|_| r.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn shape_contract() {
        let cfg = small();
        let net = Backbone::new(cfg, &mut stream(1, "init", &[])).unwrap();
        let f = net.embed(&images(2, &cfg, 3)).unwrap();
        assert_eq!(f.spatial.shape(), &[2, 4, 6]);
        assert_eq!(f.global.shape(), &[2, 6]);
    }

    #[test]
    fn global_is_brute_force_mean_of_spatial() {
        let cfg = ModelConfig {
            input_size: 32,
            ..small()
        };
        let net = Backbone::new(cfg, &mut stream(2, "init", &[])).unwrap();
        let f = net.embed(&images(3, &cfg, 4)).unwrap();
        // 32 -> 4x4 conv map, pooled to 3x3.
        assert_eq!(f.spatial.shape(), &[3, 9, 6]);
        for b in 0..3 {
            for c in 0..6 {
                let mut s = 0.0;
                for r in 0..9 {
                    s += f.spatial.at(&[b, r, c]);
                }
                assert!((s / 9.0 - f.global.at(&[b, c])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_features() {
        let cfg = small();
        let mut net = Backbone::new(cfg, &mut stream(3, "init", &[])).unwrap();
        for i in 4..6 {
            let p = net.store_mut().get_mut(i);
            p.value = Tensor::zeros(p.value.shape());
        }
        let x = Tensor::full(&[2, 2, 16, 16], 0.4);
        let f = net.embed(&x).unwrap();
        assert!(f.spatial.data().iter().all(|&v| v == 0.0));
        assert!(f.global.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_shape_is_config_error() {
        let cfg = small();
        let net = Backbone::new(cfg, &mut stream(3, "init", &[])).unwrap();
        let err = net.embed(&Tensor::zeros(&[1, 3, 16, 16])).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn attention_shapes_and_unit_values() {
        let heads = AuxHeads::new(6, 3, &mut stream(4, "heads", &[])).unwrap();
        let mut g = Graph::new();
        let p = heads.store().bind(&mut g, false);
        let mut r = stream(5, "z", &[]);
        let z = g.constant(
            Tensor::new(
                vec![2, 1, 6],
                (0..12).map(|_| r.random_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
        );
        let a = heads.attention(&mut g, &p, z).unwrap();
        assert_eq!(g.shape(a.value), &[2, 1, 3]);
        assert_eq!(g.shape(a.query), &[2, 1, 3]);
        for row in g.value(a.value).data().chunks(3) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-6 || n == 0.0);
        }
        let again = AuxHeads::new(6, 3, &mut stream(4, "heads", &[])).unwrap();
        assert_eq!(heads, again);
    }

    #[test]
    fn projection_of_zero_is_zero_with_zero_bias() {
        let heads = AuxHeads::new(6, 3, &mut stream(4, "heads", &[])).unwrap();
        let mut g = Graph::new();
        let p = heads.store().bind(&mut g, false);
        let z = g.constant(Tensor::zeros(&[2, 6]));
        let f = heads.project(&mut g, &p, z).unwrap();
        assert_eq!(g.shape(f), &[2, 3]);
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig {
            head_dim: 7,
            ..small()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            input_size: 7,
            ..small()
        }
        .validate()
        .is_err());
        assert!(ModelConfig::paper().validate().is_ok());
        assert_eq!(ModelConfig::desk().spatial_side(), 2);
    }
}
